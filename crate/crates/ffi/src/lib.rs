//! C ABI over the detector: rotated-rectangle geometry, NMS and inference
//! with a trained checkpoint. The matching declarations live in
//! `include/sifcn.h`.
//!
//! Conventions:
//! - every fallible function returns a [`SifcnStatus`]; on failure a
//!   message is available from [`sifcn_last_error`] on the same thread;
//! - models are opaque handles created by [`sifcn_model_load`] and released
//!   with [`sifcn_model_free`];
//! - output arrays are caller-allocated; when one is too small the call
//!   fails with `SIFCN_ERR_BUFFER` and reports the required length;
//! - panics never cross the boundary; they surface as `SIFCN_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sifcn::decode::{decode_detections, DecodeSpec};
use sifcn::geom::{iou, nms_indices, restore_rect, PixelGeometry, Point, RotatedRect};
use sifcn::net::{Sifcn, FINAL_SCALE};
use sifcn::tensor::Tensor;
use sifcn::trainer::{load_checkpoint, TrainState};

pub type SifcnStatus = i32;

pub const SIFCN_OK: SifcnStatus = 0;
pub const SIFCN_ERR_NULL: SifcnStatus = 1;
pub const SIFCN_ERR_INVALID: SifcnStatus = 2;
pub const SIFCN_ERR_IO: SifcnStatus = 3;
pub const SIFCN_ERR_BUFFER: SifcnStatus = 4;
pub const SIFCN_ERR_PANIC: SifcnStatus = 5;

/// A rotated rectangle: vertices p0..p3 clockwise from the top-left one in
/// image coordinates (y down), as x0, y0, ..., x3, y3; angle in radians,
/// counter-clockwise positive; detection score (1 for annotations).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SifcnRect {
    pub vertices: [f64; 8],
    pub theta: f64,
    pub score: f64,
}

impl From<&RotatedRect> for SifcnRect {
    fn from(r: &RotatedRect) -> Self {
        let mut vertices = [0.0; 8];
        for (k, p) in r.vertices.iter().enumerate() {
            vertices[2 * k] = p.x;
            vertices[2 * k + 1] = p.y;
        }
        SifcnRect { vertices, theta: r.theta, score: r.score }
    }
}

impl From<&SifcnRect> for RotatedRect {
    fn from(r: &SifcnRect) -> Self {
        let vertices = std::array::from_fn(|k| Point::new(r.vertices[2 * k], r.vertices[2 * k + 1]));
        RotatedRect { vertices, theta: r.theta, score: r.score }
    }
}

/// Opaque model handle.
pub struct SifcnModel {
    net: Sifcn,
    state: TrainState<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

/// Runs `body`, recording its error message and converting panics.
fn guard(body: impl FnOnce() -> Result<(), (SifcnStatus, String)>) -> SifcnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            SIFCN_OK
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SIFCN_ERR_PANIC
        }
    }
}

fn null(what: &str) -> (SifcnStatus, String) {
    (SIFCN_ERR_NULL, format!("{what} is null"))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sifcn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sifcn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Restores the rectangle seen from pixel centre (`x`, `y`) at edge
/// distances `distances` (top, right, bottom, left) and angle `theta`.
///
/// # Safety
/// `distances` must point to 4 readable doubles and `out` to a writable
/// `SifcnRect`.
#[no_mangle]
pub unsafe extern "C" fn sifcn_restore_rect(x: f64, y: f64, distances: *const f64, theta: f64, out: *mut SifcnRect) -> SifcnStatus {
    guard(|| {
        if distances.is_null() {
            return Err(null("distances"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let d = std::slice::from_raw_parts(distances, 4);
        let g = PixelGeometry { point: Point::new(x, y), distances: [d[0], d[1], d[2], d[3]], theta };
        let r = restore_rect(&g).map_err(|e| (SIFCN_ERR_INVALID, e.to_string()))?;
        *out = SifcnRect::from(&r);
        Ok(())
    })
}

/// Intersection over union of two rotated rectangles.
///
/// # Safety
/// `a` and `b` must point to readable `SifcnRect`s and `out` to a writable
/// double.
#[no_mangle]
pub unsafe extern "C" fn sifcn_rect_iou(a: *const SifcnRect, b: *const SifcnRect, out: *mut f64) -> SifcnStatus {
    guard(|| {
        let (Some(a), Some(b)) = (a.as_ref(), b.as_ref()) else {
            return Err(null("rectangle"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        if a.vertices.iter().chain(&b.vertices).any(|v| !v.is_finite()) {
            return Err((SIFCN_ERR_INVALID, "non-finite vertex".into()));
        }
        *out = iou(&RotatedRect::from(a), &RotatedRect::from(b));
        Ok(())
    })
}

/// Greedy non-maximum suppression. Writes the indices of the kept
/// rectangles, best score first, to `keep` and their number to `n_keep`.
///
/// # Safety
/// `rects` must point to `n` readable `SifcnRect`s (may be null when `n` is
/// 0), `keep` to `capacity` writable `size_t`s and `n_keep` to a writable
/// `size_t`.
#[no_mangle]
pub unsafe extern "C" fn sifcn_nms(rects: *const SifcnRect, n: usize, iou_threshold: f64, keep: *mut usize, capacity: usize, n_keep: *mut usize) -> SifcnStatus {
    guard(|| {
        if n_keep.is_null() {
            return Err(null("n_keep"));
        }
        if n > 0 && rects.is_null() {
            return Err(null("rects"));
        }
        if !(0.0..=1.0).contains(&iou_threshold) {
            return Err((SIFCN_ERR_INVALID, format!("iou_threshold {iou_threshold} outside [0, 1]")));
        }
        let boxes: Vec<RotatedRect> = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(rects, n).iter().map(RotatedRect::from).collect() };
        let kept = nms_indices(&boxes, iou_threshold);
        *n_keep = kept.len();
        if kept.len() > capacity {
            return Err((SIFCN_ERR_BUFFER, format!("{} indices do not fit in {capacity}", kept.len())));
        }
        if !kept.is_empty() {
            if keep.is_null() {
                return Err(null("keep"));
            }
            std::slice::from_raw_parts_mut(keep, kept.len()).copy_from_slice(&kept);
        }
        Ok(())
    })
}

/// Loads a training checkpoint. On success `*out` owns a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a writable
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn sifcn_model_load(path: *const c_char, out: *mut *mut SifcnModel) -> SifcnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|e| (SIFCN_ERR_INVALID, format!("path is not UTF-8: {e}")))?;
        let (meta, state) = load_checkpoint::<f64>(Path::new(path)).map_err(|e| (SIFCN_ERR_IO, e.to_string()))?;
        let net = Sifcn::new(meta.network).map_err(|e| (SIFCN_ERR_INVALID, e.to_string()))?;
        *out = Box::into_raw(Box::new(SifcnModel { net, state }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from `sifcn_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sifcn_model_free(model: *mut SifcnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length in pixels of the square images the model expects (0 for a
/// null handle).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sifcn_model_input_size(model: *const SifcnModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.spec().input_size)
}

/// Detects rectangles in one image, given as planar RGB (`3 x S x S`,
/// channel-major) with values in [0, 1], where `S` is the model input size.
/// Writes up to `capacity` detections, best first, and their total number to
/// `n_out`.
///
/// # Safety
/// `model` must be a live handle, `image` must point to `3*S*S` readable
/// doubles, `out` to `capacity` writable `SifcnRect`s (may be null when
/// `capacity` is 0) and `n_out` to a writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn sifcn_model_detect(
    model: *const SifcnModel,
    image: *const f64,
    score_threshold: f64,
    nms_iou: f64,
    out: *mut SifcnRect,
    capacity: usize,
    n_out: *mut usize,
) -> SifcnStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return Err(null("model"));
        };
        if image.is_null() {
            return Err(null("image"));
        }
        if n_out.is_null() {
            return Err(null("n_out"));
        }
        let spec = DecodeSpec { score_threshold, nms_iou, ..DecodeSpec::default() };
        spec.validate().map_err(|e| (SIFCN_ERR_INVALID, e.to_string()))?;
        let s = model.net.spec().input_size;
        let pixels = std::slice::from_raw_parts(image, 3 * s * s).to_vec();
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err((SIFCN_ERR_INVALID, "image contains non-finite values".into()));
        }
        let x = Tensor::new(vec![1, 3, s, s], pixels).map_err(|e| (SIFCN_ERR_INVALID, e.to_string()))?;
        let maps = model.net.predict(&model.state.params, &x).map_err(|e| (SIFCN_ERR_INVALID, e.to_string()))?;
        let dets = decode_detections(&maps[&FINAL_SCALE], &spec);
        *n_out = dets.len();
        if dets.len() > capacity {
            return Err((SIFCN_ERR_BUFFER, format!("{} detections do not fit in {capacity}", dets.len())));
        }
        if !dets.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            for (slot, d) in std::slice::from_raw_parts_mut(out, dets.len()).iter_mut().zip(&dets) {
                *slot = SifcnRect::from(d);
            }
        }
        Ok(())
    })
}
