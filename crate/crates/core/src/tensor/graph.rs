use super::kernels::{self, ConvGeom};
use super::{Real, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, factor: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Affine { input: Var, scale: T },
    Concat { a: Var, b: Var },
    Slice { input: Var, start: usize },
    Sum(Var),
    Dice { pred: Var, target: Tensor<T>, eps: T },
    Rotation { pred: Var, target: Tensor<T>, mask: Tensor<T> },
    IouDistance { pred: Var, target: Tensor<T>, mask: Tensor<T>, eps: T },
    BoxUpsample { dist: Var, theta: Var, factor: usize, pixel: T, dmax: T },
    NestedSum { groups: Vec<(T, Vec<(Var, T)>)> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, which is a valid topological order for the reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Left fold `sum_g w_g * (sum_i c_i * v_i)`. The graph's nested-sum node and
/// any host-side recomputation share this exact evaluation order.
pub fn nested_weighted_sum<T: Real>(groups: &[(T, Vec<(T, T)>)]) -> T {
    let mut total = T::zero();
    for (w, terms) in groups {
        let mut inner = T::zero();
        for &(c, v) in terms {
            inner += c * v;
        }
        total += *w * inner;
    }
    total
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize), TensorError> {
        self.value(v).dims4().map_err(|_| TensorError::shape(op, format!("expected 4-D input, got {:?}", self.value(v).shape())))
    }

    /// Cross-correlation of `input: BxCxHxW` with `weight: KxCxkxk` plus `bias: K`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.dims4("conv2d", input)?;
        let (k, wc, kh, kw) = self.dims4("conv2d", weight)?;
        if wc != c {
            return Err(TensorError::config("conv2d", format!("input has {c} channels, weights expect {wc}")));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(TensorError::config("conv2d", format!("unsupported kernel {kh}x{kw}")));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::config("conv2d", format!("stride {stride} / padding {padding} invalid for {h}x{w}")));
        }
        if self.value(bias).len() != k {
            return Err(TensorError::shape("conv2d", format!("bias has {} values, expected {k}", self.value(bias).len())));
        }
        let geom = ConvGeom { batch: b, in_ch: c, in_h: h, in_w: w, out_ch: k, kernel: kh, stride, padding };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let value = Tensor::new(vec![b, k, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    /// 2x2 stride-2 max pooling.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.dims4("maxpool2", input)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::config("maxpool2", format!("odd spatial extent {h}x{w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward((b, c, h, w), self.value(input).data());
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn unpool2(&mut self, input: Var) -> Result<Var, TensorError> {
        self.upsample(input, 2)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.dims4("upsample", input)?;
        if factor == 0 {
            return Err(TensorError::config("upsample", "factor must be positive"));
        }
        let out = kernels::upsample_nearest((b, c, h, w), factor, self.value(input).data());
        let value = Tensor::new(vec![b, c, h * factor, w * factor], out)?;
        Ok(self.push(value, Op::Upsample { input, factor }, &[input]))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    /// `scale * a + offset`.
    pub fn scalar_affine(&mut self, a: Var, scale: T, offset: T) -> Var {
        let v = self.value(a).map(|x| scale * x + offset);
        self.push(v, Op::Affine { input: a, scale }, &[a])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ba, ca, ha, wa) = self.dims4("concat_channels", a)?;
        let (bb, cb, hb, wb) = self.dims4("concat_channels", b)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(TensorError::shape("concat_channels", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        let mut data = Vec::with_capacity(ba * (pa + pb));
        for i in 0..ba {
            data.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let v = Tensor::new(vec![ba, ca + cb, ha, wa], data)?;
        Ok(self.push(v, Op::Concat { a, b }, &[a, b]))
    }

    /// Channels `start..start + len` of a 4-D tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.dims4("slice_channels", input)?;
        if start + len > c || len == 0 {
            return Err(TensorError::shape("slice_channels", format!("range {start}..{} of {c} channels", start + len)));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for i in 0..b {
            let off = (i * c + start) * plane;
            data.extend_from_slice(&self.value(input).data()[off..off + len * plane]);
        }
        let v = Tensor::new(vec![b, len, h, w], data)?;
        Ok(self.push(v, Op::Slice { input, start }, &[input]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Dice loss `1 - (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)` with the
    /// sums running over every pixel of the batch.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, eps: T) -> Result<Var, TensorError> {
        same_shape("dice_loss", self.value(pred), target)?;
        self.dims4("dice_loss", pred)?;
        let v = Tensor::scalar(dice_value(self.value(pred).data(), target.data(), eps));
        Ok(self.push(v, Op::Dice { pred, target: target.clone(), eps }, &[pred]))
    }

    /// Mean of `1 - cos(pred - target)` over the masked pixels of the batch;
    /// 0 when the mask is empty.
    pub fn rotation_loss(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var, TensorError> {
        same_shape("rotation_loss", self.value(pred), target)?;
        same_shape("rotation_loss", self.value(pred), mask)?;
        self.dims4("rotation_loss", pred)?;
        let count: T = mask.data().iter().copied().sum();
        let mut total = T::zero();
        if count > T::zero() {
            let p = self.value(pred).data();
            let s: T = p.iter().zip(target.data()).zip(mask.data()).map(|((&a, &g), &w)| w * (T::one() - (a - g).cos())).sum();
            total = s / count;
        }
        Ok(self.push(Tensor::scalar(total), Op::Rotation { pred, target: target.clone(), mask: mask.clone() }, &[pred]))
    }

    /// Mean IoU loss `-ln((I + eps) / (U + eps))` over the masked pixels of the
    /// batch for `Bx4xHxW` distance maps with channel order (top, right,
    /// bottom, left); `mask` is `Bx1xHxW`. 0 when the mask is empty.
    pub fn iou_loss(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>, eps: T) -> Result<Var, TensorError> {
        same_shape("iou_loss", self.value(pred), target)?;
        let (b, c, h, w) = self.dims4("iou_loss", pred)?;
        if c != 4 || mask.shape() != [b, 1, h, w] {
            return Err(TensorError::shape("iou_loss", format!("pred {:?}, mask {:?}", self.value(pred).shape(), mask.shape())));
        }
        let plane = h * w;
        let p = self.value(pred).data();
        let count: T = mask.data().iter().copied().sum();
        let mut total = T::zero();
        if count > T::zero() {
            let mut s = T::zero();
            for (k, &mw) in mask.data().iter().enumerate() {
                if mw != T::zero() {
                    let (i, j) = (k / plane, k % plane);
                    s += mw * iou_pixel(gather4(p, i, plane, j), gather4(target.data(), i, plane, j), eps).0;
                }
            }
            total = s / count;
        }
        Ok(self.push(Tensor::scalar(total), Op::IouDistance { pred, target: target.clone(), mask: mask.clone(), eps }, &[pred]))
    }

    /// Upsamples a `Bx4xhxw` distance map by `factor` so that every fine pixel
    /// describes the same rotated box as its coarse cell: the fine pixel's
    /// offset from the cell centre (in input pixels, `pixel` per fine pixel) is
    /// rotated into the box frame and added to the edge distances. Results are
    /// clamped to `[0, dmax]`.
    pub fn box_upsample(&mut self, dist: Var, theta: Var, factor: usize, pixel: T, dmax: T) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.dims4("box_upsample", dist)?;
        if c != 4 || self.value(theta).shape() != [b, 1, h, w] {
            return Err(TensorError::shape("box_upsample", format!("dist {:?}, theta {:?}", self.value(dist).shape(), self.value(theta).shape())));
        }
        if factor == 0 {
            return Err(TensorError::config("box_upsample", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let d = self.value(dist).data();
        let th = self.value(theta).data();
        let mut out = vec![T::zero(); b * 4 * oh * ow];
        for i in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    let src = (y / factor) * w + x / factor;
                    let (a, bb) = box_shift(th[i * h * w + src], x, y, factor, pixel);
                    let base = i * 4 * h * w + src;
                    let vals = [
                        d[base] + bb,
                        d[base + h * w] - a,
                        d[base + 2 * h * w] - bb,
                        d[base + 3 * h * w] + a,
                    ];
                    for (ch, v) in vals.into_iter().enumerate() {
                        out[((i * 4 + ch) * oh + y) * ow + x] = v.max(T::zero()).min(dmax);
                    }
                }
            }
        }
        let v = Tensor::new(vec![b, 4, oh, ow], out)?;
        Ok(self.push(v, Op::BoxUpsample { dist, theta, factor, pixel, dmax }, &[dist, theta]))
    }

    /// `sum_g w_g * (sum_i c_i * v_i)` over scalar nodes.
    pub fn nested_sum(&mut self, groups: Vec<(T, Vec<(Var, T)>)>) -> Result<Var, TensorError> {
        let mut folded = Vec::with_capacity(groups.len());
        let mut inputs = Vec::new();
        for (w, terms) in &groups {
            let mut vals = Vec::with_capacity(terms.len());
            for &(v, c) in terms {
                if !self.value(v).is_scalar() {
                    return Err(TensorError::shape("nested_sum", format!("non-scalar term {:?}", self.value(v).shape())));
                }
                vals.push((c, self.value(v).data()[0]));
                inputs.push(v);
            }
            folded.push((*w, vals));
        }
        let v = Tensor::scalar(nested_weighted_sum(&folded));
        Ok(self.push(v, Op::NestedSum { groups }, &inputs))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every node
    /// that requires them; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                        *a += *d;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("adjoint shape")),
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                // Take the weight and bias slots out so three mutable buffers can coexist.
                let mut dw = self.slot(adj, *weight).map(std::mem::take);
                let mut db = self.slot(adj, *bias).map(std::mem::take);
                let dx = self.slot(adj, *input);
                kernels::conv2d_backward(geom, x, wt, g, dx.map(|v| v.as_mut_slice()), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dw) = dw {
                    adj[weight.0] = Some(dw);
                }
                if let Some(db) = db {
                    adj[bias.0] = Some(db);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(dx) = self.slot(adj, *input) {
                    for (&src, &d) in argmax.iter().zip(g) {
                        dx[src] += d;
                    }
                }
            }
            Op::Upsample { input, factor } => {
                let dims = self.value(*input).dims4().expect("4-D");
                if let Some(dx) = self.slot(adj, *input) {
                    kernels::upsample_nearest_backward(dims, *factor, g, dx);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if let Some(d) = self.slot(adj, v) {
                        d.iter_mut().zip(g).for_each(|(d, &gi)| *d += sign * gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(d) = self.slot(adj, v) {
                        d.iter_mut().zip(g).for_each(|(d, &gi)| *d += sign * gi);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = self.value(other).data();
                    if let Some(d) = self.slot(adj, v) {
                        d.iter_mut().zip(g).zip(o).for_each(|((d, &gi), &oi)| *d += gi * oi);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.slot(adj, *a) {
                    d.iter_mut().zip(g).zip(x).for_each(|((d, &gi), &xi)| {
                        if xi > T::zero() {
                            *d += gi
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(d) = self.slot(adj, *a) {
                    d.iter_mut().zip(g).zip(y).for_each(|((d, &gi), &yi)| *d += gi * yi * (T::one() - yi));
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(d) = self.slot(adj, *a) {
                    d.iter_mut().zip(g).zip(y).for_each(|((d, &gi), &yi)| *d += gi * (T::one() - yi * yi));
                }
            }
            Op::Affine { input, scale } => {
                if let Some(d) = self.slot(adj, *input) {
                    d.iter_mut().zip(g).for_each(|(d, &gi)| *d += *scale * gi);
                }
            }
            Op::Concat { a, b } => {
                let (bs, ca, h, w) = self.value(*a).dims4().expect("4-D");
                let cb = self.value(*b).dims4().expect("4-D").1;
                let (pa, pb) = (ca * h * w, cb * h * w);
                if let Some(d) = self.slot(adj, *a) {
                    for i in 0..bs {
                        let src = &g[i * (pa + pb)..i * (pa + pb) + pa];
                        d[i * pa..(i + 1) * pa].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
                if let Some(d) = self.slot(adj, *b) {
                    for i in 0..bs {
                        let src = &g[i * (pa + pb) + pa..(i + 1) * (pa + pb)];
                        d[i * pb..(i + 1) * pb].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Slice { input, start } => {
                let (bs, c, h, w) = self.value(*input).dims4().expect("4-D");
                let len = node.value.shape()[1];
                let plane = h * w;
                if let Some(d) = self.slot(adj, *input) {
                    for i in 0..bs {
                        let off = (i * c + start) * plane;
                        let src = &g[i * len * plane..(i + 1) * len * plane];
                        d[off..off + len * plane].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.slot(adj, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Dice { pred, target, eps } => {
                let p = self.value(*pred).data();
                if let Some(d) = self.slot(adj, *pred) {
                    dice_grad(p, target.data(), *eps, g[0], d);
                }
            }
            Op::Rotation { pred, target, mask } => {
                let p = self.value(*pred).data();
                let count: T = mask.data().iter().copied().sum();
                if let Some(d) = self.slot(adj, *pred) {
                    if count > T::zero() {
                        let scale = g[0] / count;
                        for (j, &m) in mask.data().iter().enumerate() {
                            if m != T::zero() {
                                d[j] += scale * m * (p[j] - target.data()[j]).sin();
                            }
                        }
                    }
                }
            }
            Op::IouDistance { pred, target, mask, eps } => {
                let p = self.value(*pred).data();
                let (_, _, h, w) = self.value(*pred).dims4().expect("4-D");
                let plane = h * w;
                let count: T = mask.data().iter().copied().sum();
                if let Some(d) = self.slot(adj, *pred) {
                    if count > T::zero() {
                        let scale = g[0] / count;
                        for (k, &mw) in mask.data().iter().enumerate() {
                            if mw == T::zero() {
                                continue;
                            }
                            let (i, j) = (k / plane, k % plane);
                            let (_, grad) = iou_pixel(gather4(p, i, plane, j), gather4(target.data(), i, plane, j), *eps);
                            for (ch, gc) in grad.into_iter().enumerate() {
                                d[(i * 4 + ch) * plane + j] += scale * mw * gc;
                            }
                        }
                    }
                }
            }
            Op::BoxUpsample { dist, theta, factor, pixel, dmax } => {
                let (b, _, h, w) = self.value(*dist).dims4().expect("4-D");
                let (oh, ow) = (h * factor, w * factor);
                let th = self.value(*theta).data();
                let out = node.value.data();
                let mut dd = vec![T::zero(); b * 4 * h * w];
                let mut dth = vec![T::zero(); b * h * w];
                for i in 0..b {
                    for y in 0..oh {
                        for x in 0..ow {
                            let src = (y / factor) * w + x / factor;
                            let (a, bb) = box_shift(th[i * h * w + src], x, y, *factor, *pixel);
                            // d(shift)/d(theta) for channels (top, right, bottom, left)
                            let dshift = [a, bb, -a, -bb];
                            for (ch, ds) in dshift.into_iter().enumerate() {
                                let o = ((i * 4 + ch) * oh + y) * ow + x;
                                let v = out[o];
                                if v <= T::zero() || v >= *dmax {
                                    continue;
                                }
                                dd[i * 4 * h * w + ch * h * w + src] += g[o];
                                dth[i * h * w + src] += g[o] * ds;
                            }
                        }
                    }
                }
                if let Some(d) = self.slot(adj, *dist) {
                    d.iter_mut().zip(&dd).for_each(|(d, &s)| *d += s);
                }
                if let Some(d) = self.slot(adj, *theta) {
                    d.iter_mut().zip(&dth).for_each(|(d, &s)| *d += s);
                }
            }
            Op::NestedSum { groups } => {
                for (wg, terms) in groups {
                    for &(v, c) in terms {
                        if let Some(d) = self.slot(adj, v) {
                            d[0] += g[0] * *wg * c;
                        }
                    }
                }
            }
        }
    }
}

fn dice_value<T: Real>(p: &[T], g: &[T], eps: T) -> T {
    let two = T::one() + T::one();
    let (mut pg, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in p.iter().zip(g) {
        pg += a * b;
        pp += a * a;
        gg += b * b;
    }
    T::one() - (two * pg + eps) / (pp + gg + eps)
}

fn dice_grad<T: Real>(p: &[T], g: &[T], eps: T, scale: T, out: &mut [T]) {
    let two = T::one() + T::one();
    let (mut pg, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in p.iter().zip(g) {
        pg += a * b;
        pp += a * a;
        gg += b * b;
    }
    let num = two * pg + eps;
    let den = pp + gg + eps;
    for ((o, &a), &b) in out.iter_mut().zip(p).zip(g) {
        *o += scale * -(two * b * den - num * two * a) / (den * den);
    }
}

fn gather4<T: Real>(data: &[T], batch: usize, plane: usize, j: usize) -> [T; 4] {
    let base = batch * 4 * plane + j;
    [data[base], data[base + plane], data[base + 2 * plane], data[base + 3 * plane]]
}

/// Loss and gradient w.r.t. the predicted (top, right, bottom, left) distances.
fn iou_pixel<T: Real>(p: [T; 4], g: [T; 4], eps: T) -> (T, [T; 4]) {
    let [pt, pr, pb, pl] = p;
    let [gt, gr, gb, gl] = g;
    let iw = pl.min(gl) + pr.min(gr);
    let ih = pt.min(gt) + pb.min(gb);
    let inter = iw * ih;
    let area_p = (pt + pb) * (pl + pr);
    let area_g = (gt + gb) * (gl + gr);
    let union = area_p + area_g - inter;
    let loss = -((inter + eps) / (union + eps)).ln();
    let ind = |a: T, b: T| if a < b { T::one() } else { T::zero() };
    // dI/dx for x in (t, r, b, l)
    let di = [iw * ind(pt, gt), ih * ind(pr, gr), iw * ind(pb, gb), ih * ind(pl, gl)];
    let da = [pl + pr, pt + pb, pl + pr, pt + pb];
    let mut grad = [T::zero(); 4];
    for k in 0..4 {
        grad[k] = -di[k] / (inter + eps) + (da[k] - di[k]) / (union + eps);
    }
    (loss, grad)
}

/// Rotation of the sub-pixel offset of fine pixel `(x, y)` into the box frame.
fn box_shift<T: Real>(theta: T, x: usize, y: usize, factor: usize, pixel: T) -> (T, T) {
    let dx = kernels::subpixel_offset::<T>(x, factor) * pixel;
    let dy = kernels::subpixel_offset::<T>(y, factor) * pixel;
    let (s, c) = theta.sin_cos();
    (c * dx - s * dy, s * dx + c * dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_conv_multiply_add() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let w = g.param(t(&[1, 1, 1, 1], &[3.0]));
        let b = g.param(t(&[1], &[1.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
    }

    #[test]
    fn conv_same_padding_counts() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.at4(0, 0, 1, 1), 9.0);
        assert_eq!(v.at4(0, 0, 0, 0), 4.0);
        assert_eq!(v.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_weight_grad_counts_valid_positions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.param(Tensor::full(&[1, 1, 3, 3], 0.5));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        // Corner taps see 4 valid positions, edge taps 6, the centre tap 9.
        assert_eq!(g.grad(w).unwrap().data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.param(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.param(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(TensorError::Config { .. })));
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1, 1, 2, 4], 3.0));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::<f64>::zeros(&[1, 1, 3, 4]));
        assert!(matches!(g.maxpool2(x), Err(TensorError::Config { .. })));
    }

    #[test]
    fn unpool_replicates_and_sums_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1, 1, 1], &[5.0]));
        let y = g.unpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0; 4]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn unpool_of_pool_restores_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::<f64>::zeros(&[2, 3, 8, 6]));
        let p = g.maxpool2(x).unwrap();
        let u = g.unpool2(p).unwrap();
        assert_eq!(g.value(u).shape(), g.value(x).shape());
    }

    #[test]
    fn elementwise_identities() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 3], &[-1.0, 0.5, 2.0]));
        let ones = g.constant(Tensor::full(&[1, 1, 1, 3], 1.0));
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let z = g.constant(Tensor::zeros(&[1]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        let a = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 2, 2]);
        let bad = g.constant(Tensor::zeros(&[1, 3, 2, 1]));
        assert!(g.concat_channels(a, bad).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn sigmoid_and_tanh_ranges_hold_for_large_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[-800.0, -30.0, 30.0, 800.0]));
        let s = g.sigmoid(x);
        let th = g.tanh(x);
        assert!(g.value(s).all_finite());
        assert!(g.value(s).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(g.value(th).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let data = [0.3, -1.2, 2.0];
        let x = g.param(t(&[3], &data));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 3]);
        g.zero_grad();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn fan_out_gradients_add() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 3, 2, 3], |i| -(i as f64) - 0.5));
        let c = g.concat_channels(a, b).unwrap();
        let a2 = g.slice_channels(c, 0, 2).unwrap();
        let b2 = g.slice_channels(c, 2, 3).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn box_upsample_preserves_axis_aligned_boxes() {
        let mut g = Graph::<f64>::new();
        // one coarse cell, distances (t, r, b, l) = (4, 5, 6, 7), theta 0
        let d = g.constant(t(&[1, 4, 1, 1], &[4.0, 5.0, 6.0, 7.0]));
        let th = g.constant(t(&[1, 1, 1, 1], &[0.0]));
        let up = g.box_upsample(d, th, 4, 1.0, 100.0).unwrap();
        let v = g.value(up);
        // fine pixel (0, 0) is 1.5 px left of and above the cell centre
        assert_eq!([v.at4(0, 0, 0, 0), v.at4(0, 1, 0, 0), v.at4(0, 2, 0, 0), v.at4(0, 3, 0, 0)], [2.5, 6.5, 7.5, 5.5]);
        assert_eq!([v.at4(0, 0, 3, 3), v.at4(0, 1, 3, 3), v.at4(0, 2, 3, 3), v.at4(0, 3, 3, 3)], [5.5, 3.5, 4.5, 8.5]);
    }
}
