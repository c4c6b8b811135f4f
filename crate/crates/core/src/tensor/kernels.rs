// Raw forward/backward kernels on flat NCHW buffers.

use super::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.in_ch * g.in_h * g.in_w;
    let out_stride = g.out_ch * ncols;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let y = &mut out[b * out_stride..(b + 1) * out_stride];
        for (k, plane) in y.chunks_mut(ncols).enumerate() {
            plane.fill(bias[k]);
        }
        let colmat: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        T::gemm(g.out_ch, rows, ncols, weight, false, colmat, false, T::one(), y);
    }
    out
}

/// Accumulates input, weight and bias gradients. Any of the outputs may be skipped.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.in_ch * g.in_h * g.in_w;
    let out_stride = g.out_ch * ncols;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
    let mut dcols = vec![T::zero(); rows * ncols];
    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let dy = &dout[b * out_stride..(b + 1) * out_stride];
        if let Some(db) = dbias.as_deref_mut() {
            for (k, plane) in dy.chunks(ncols).enumerate() {
                db[k] += plane.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            let colmat: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            // dW (K x rows) += dY (K x ncols) * cols^T
            T::gemm(g.out_ch, ncols, rows, dy, false, colmat, true, T::one(), dw);
        }
        if let Some(dx) = dinput.as_deref_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                T::gemm(rows, g.out_ch, ncols, weight, true, dy, false, T::one(), dxb);
            } else {
                T::gemm(rows, g.out_ch, ncols, weight, true, dy, false, T::zero(), &mut dcols);
                col2im_add(g, &dcols, dxb);
            }
        }
    }
}

/// 2x2 stride-2 max pooling. Returns values and the flat input index of each
/// window's maximum (first in row-major window order on ties).
pub(crate) fn maxpool2_forward<T: Real>(shape: (usize, usize, usize, usize), input: &[T]) -> (Vec<T>, Vec<usize>) {
    let (b, c, h, w) = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample_nearest<T: Real>(shape: (usize, usize, usize, usize), factor: usize, input: &[T]) -> Vec<T> {
    let (b, c, h, w) = shape;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Real>(
    shape: (usize, usize, usize, usize),
    factor: usize,
    dout: &[T],
    dinput: &mut [T],
) {
    let (b, c, h, w) = shape;
    let (oh, ow) = (h * factor, w * factor);
    for plane in 0..b * c {
        let src = &dout[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dinput[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
}

/// Offset of fine pixel `i` from the centre of its coarse cell, in fine pixels.
pub(crate) fn subpixel_offset<T: Real>(i: usize, factor: usize) -> T {
    let f = T::from_usize(factor).unwrap();
    T::from_usize(i % factor).unwrap() + T::from_f64_lossy(0.5) - f / T::from_f64_lossy(2.0)
}
