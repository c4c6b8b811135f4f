//! Fusion blocks and output heads as compositions of tape primitives.

use std::f64::consts::FRAC_PI_2;

use crate::tensor::{Graph, Real, Var};

use super::params::ConvVars;
use super::NetError;

/// Parameters of one fusion block. `weighting` is present only for the
/// complementary weighted variant.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub weighting: Option<ConvVars>,
    pub reduce: ConvVars,
    pub merge: ConvVars,
}

/// Graph nodes of one set of detection maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapVars {
    pub score: Var,
    pub rotation: Var,
    pub distance: Var,
    pub stride: usize,
}

pub fn conv_relu<T: Real>(g: &mut Graph<T>, x: Var, c: ConvVars, kernel_pad: usize) -> Result<Var, NetError> {
    let y = g.conv2d(x, c.weight, c.bias, 1, kernel_pad)?;
    Ok(g.relu(y))
}

fn check_pair<T: Real>(g: &Graph<T>, u_prev: Var, f_cur: Var) -> Result<(), NetError> {
    let (ub, _, uh, uw) = g.value(u_prev).dims4()?;
    let (fb, _, fh, fw) = g.value(f_cur).dims4()?;
    if ub != fb || fh != 2 * uh || fw != 2 * uw {
        return Err(NetError::Config(format!(
            "fusion input mismatch: coarse {:?}, fine {:?}",
            g.value(u_prev).shape(),
            g.value(f_cur).shape()
        )));
    }
    Ok(())
}

/// Concatenation followed by the 1x1 channel reduction and 3x3 merge.
fn merge<T: Real>(g: &mut Graph<T>, up: Var, fine: Var, p: &BlockVars) -> Result<Var, NetError> {
    let cat = g.concat_channels(up, fine)?;
    let reduced = conv_relu(g, cat, p.reduce, 0)?;
    conv_relu(g, reduced, p.merge, 1)
}

/// Unweighted fusion: upsample the coarse map, concatenate, reduce, merge.
pub fn uf_block<T: Real>(g: &mut Graph<T>, u_prev: Var, f_cur: Var, p: &BlockVars) -> Result<Var, NetError> {
    check_pair(g, u_prev, f_cur)?;
    let up = g.unpool2(u_prev)?;
    merge(g, up, f_cur, p)
}

/// Complementary weighted fusion: the fine features are scaled elementwise by
/// `1 - conv1x1(up)` before the same concatenate/reduce/merge as [`uf_block`].
pub fn cwf_block<T: Real>(g: &mut Graph<T>, u_prev: Var, f_cur: Var, p: &BlockVars) -> Result<Var, NetError> {
    check_pair(g, u_prev, f_cur)?;
    let w = p.weighting.ok_or_else(|| NetError::MissingParam("weighting conv".into()))?;
    let up = g.unpool2(u_prev)?;
    let response = g.conv2d(up, w.weight, w.bias, 1, 0)?;
    let complement = g.scalar_affine(response, -T::one(), T::one());
    let weighted = g.mul(f_cur, complement)?;
    merge(g, up, weighted, p)
}

/// Margin keeping score and rotation strictly inside their open ranges once
/// sigmoid/tanh saturate in floating point.
pub const RANGE_MARGIN: f64 = 1e-6;

/// 1x1 conv to six channels: sigmoid score, `tanh * pi/2` rotation and
/// `sigmoid * dmax` distances. Score and rotation are shrunk by
/// [`RANGE_MARGIN`] towards the centre of their ranges.
pub fn output_head<T: Real>(g: &mut Graph<T>, features: Var, dmax: f64, head: ConvVars, stride: usize) -> Result<MapVars, NetError> {
    let raw = g.conv2d(features, head.weight, head.bias, 1, 0)?;
    let s = g.slice_channels(raw, 0, 1)?;
    let r = g.slice_channels(raw, 1, 1)?;
    let d = g.slice_channels(raw, 2, 4)?;
    let ss = g.sigmoid(s);
    let score = g.scalar_affine(ss, T::from_f64_lossy(1.0 - 2.0 * RANGE_MARGIN), T::from_f64_lossy(RANGE_MARGIN));
    let rt = g.tanh(r);
    let rotation = g.scalar_affine(rt, T::from_f64_lossy(FRAC_PI_2 * (1.0 - RANGE_MARGIN)), T::zero());
    let ds = g.sigmoid(d);
    let distance = g.scalar_affine(ds, T::from_f64_lossy(dmax), T::zero());
    Ok(MapVars { score, rotation, distance, stride })
}

/// Brings maps at stride `factor` to stride 1. Score and rotation are
/// replicated; distances are shifted so every fine pixel keeps describing the
/// coarse cell's box.
pub fn upsample_maps<T: Real>(g: &mut Graph<T>, maps: MapVars, factor: usize, dmax: f64) -> Result<MapVars, NetError> {
    let score = g.upsample(maps.score, factor)?;
    let rotation = g.upsample(maps.rotation, factor)?;
    let out_stride = maps.stride / factor;
    let distance = g.box_upsample(maps.distance, maps.rotation, factor, T::from_usize(out_stride).unwrap(), T::from_f64_lossy(dmax))?;
    Ok(MapVars { score, rotation, distance, stride: out_stride })
}
