//! Detection maps to rotated boxes: thresholding, per-pixel restoration, NMS,
//! and the detection file format.
//!
//! Detection files hold one box per line:
//!
//! ```text
//! # image_id score theta x0 y0 x1 y1 x2 y2 x3 y3
//! img0 0.93 0.12 10 8 30 6 31 20 11 22
//! ```
//!
//! Fields are whitespace separated; `#` lines and blank lines are ignored.
//! Numbers are written in shortest round-trip form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{nms, restore_rect, PixelGeometry, Point, RotatedRect};
use crate::maps::pixel_center;
use crate::net::DetectionMaps;
use crate::tensor::Real;

pub const DETECTION_HEADER: &str = "# image_id score theta x0 y0 x1 y1 x2 y2 x3 y3";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("decode configuration: {0}")]
    Config(String),
    #[error("detection file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSpec {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_candidates: usize,
}

impl Default for DecodeSpec {
    fn default() -> Self {
        DecodeSpec { score_threshold: 0.8, nms_iou: 0.2, max_candidates: 2000 }
    }
}

impl DecodeSpec {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.score_threshold) {
            return Err(DecodeError::Config(format!("score_threshold {} must lie in (0, 1)", self.score_threshold)));
        }
        if !open(self.nms_iou) {
            return Err(DecodeError::Config(format!("nms_iou {} must lie in (0, 1)", self.nms_iou)));
        }
        if self.max_candidates == 0 {
            return Err(DecodeError::Config("max_candidates must be positive".into()));
        }
        Ok(())
    }
}

/// Pixels scoring above the threshold, best first (ties in row-major order),
/// capped at `max_candidates`.
pub fn candidates<T: Real>(maps: &DetectionMaps<T>, spec: &DecodeSpec) -> Vec<(usize, f64)> {
    let score = maps.score.data();
    let mut c: Vec<(usize, f64)> = score.iter().enumerate().map(|(k, v)| (k, v.as_f64())).filter(|(_, v)| *v > spec.score_threshold).collect();
    c.sort_by(|a, b| b.1.total_cmp(&a.1));
    c.truncate(spec.max_candidates);
    c
}

/// Decodes single-image maps (batch size 1). Pixels whose geometry cannot be
/// restored (zero width or height) are skipped.
pub fn decode_detections<T: Real>(maps: &DetectionMaps<T>, spec: &DecodeSpec) -> Vec<RotatedRect> {
    let (h, w) = (maps.score.shape()[2], maps.score.shape()[3]);
    let plane = h * w;
    let (rot, dist) = (maps.rotation.data(), maps.distance.data());
    let boxes: Vec<RotatedRect> = candidates(maps, spec)
        .into_iter()
        .filter_map(|(k, s)| {
            let g = PixelGeometry {
                point: pixel_center(k / w, k % w, maps.stride),
                distances: [0, 1, 2, 3].map(|c| dist[c * plane + k].as_f64()),
                theta: rot[k].as_f64(),
            };
            restore_rect(&g).ok().map(|r| r.with_score(s))
        })
        .collect();
    nms(&boxes, spec.nms_iou)
}

/// Decodes every image of a batch, in order.
pub fn decode_batch<T: Real>(maps: &DetectionMaps<T>, spec: &DecodeSpec) -> Vec<Vec<RotatedRect>> {
    (0..maps.batch()).map(|b| decode_detections(&maps.item(b).expect("index in range"), spec)).collect()
}

fn fmt_rect(id: &str, r: &RotatedRect) -> String {
    let mut line = format!("{id} {} {}", r.score, r.theta);
    for p in &r.vertices {
        line.push_str(&format!(" {} {}", p.x, p.y));
    }
    line
}

/// Serialises detections keyed by image id (ids must not contain whitespace).
pub fn write_detections(dets: &BTreeMap<String, Vec<RotatedRect>>) -> String {
    let mut out = String::from(DETECTION_HEADER);
    out.push('\n');
    for (id, boxes) in dets {
        for r in boxes {
            out.push_str(&fmt_rect(id, r));
            out.push('\n');
        }
    }
    out
}

/// Parses a detection file. Images without detections do not appear.
pub fn parse_detections(text: &str) -> Result<BTreeMap<String, Vec<RotatedRect>>, DecodeError> {
    let mut out: BTreeMap<String, Vec<RotatedRect>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| DecodeError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 11 {
            return Err(err(format!("expected 11 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 10];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| err(format!("{f:?}: {e}")))?;
        }
        let vertices = std::array::from_fn(|j| Point::new(v[2 + 2 * j], v[3 + 2 * j]));
        out.entry(fields[0].to_string()).or_default().push(RotatedRect { vertices, theta: v[1], score: v[0] });
    }
    Ok(out)
}
