//! Annotation formats.
//!
//! Axis-aligned text: one box per line, `x y w h` separated by whitespace,
//! with `(x, y)` the upper-left corner. Blank lines and lines starting with
//! `#` are skipped.
//!
//! Polygon JSON: a list of `{"vertices": [[x, y] x 4], "theta": optional}`.
//! Vertices may come in either winding and from any starting corner; they are
//! relabelled so that `p0` is top-left and the winding is clockwise on screen.
//! Without `theta` the relabelling with the smallest `|theta|` is chosen.

use serde::{Deserialize, Serialize};

use crate::geom::{Point, RotatedRect};

use super::MapsError;

/// Tolerance for accepting a four-point polygon as a rectangle.
pub const RECT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl AxisBox {
    pub fn to_rect(self) -> RotatedRect {
        RotatedRect::from_axis_aligned(self.x, self.y, self.w, self.h)
    }
}

pub fn parse_axis_boxes(text: &str) -> Result<Vec<AxisBox>, MapsError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| MapsError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields (x y w h), found {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("{f:?} is not finite")));
            }
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err(format!("width and height must be positive, got {} x {}", v[2], v[3])));
        }
        out.push(AxisBox { x: v[0], y: v[1], w: v[2], h: v[3] });
    }
    Ok(out)
}

/// Axis-aligned boxes as rectangles with `theta = 0`.
pub fn parse_axis_aligned(text: &str) -> Result<Vec<RotatedRect>, MapsError> {
    Ok(parse_axis_boxes(text)?.into_iter().map(AxisBox::to_rect).collect())
}

pub fn write_axis_boxes(boxes: &[AxisBox]) -> String {
    boxes.iter().map(|b| format!("{} {} {} {}\n", b.x, b.y, b.w, b.h)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolygonRecord {
    vertices: [[f64; 2]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
}

fn relabel(points: [Point; 4], theta: Option<f64>) -> Result<RotatedRect, String> {
    let mut pts = points;
    if crate::geom::polygon_area(&pts) < 0.0 {
        pts.reverse();
    }
    let candidates: Vec<RotatedRect> = (0..4).map(|k| RotatedRect::from_vertices(std::array::from_fn(|i| pts[(i + k) % 4]))).collect();
    let chosen = match theta {
        Some(t) => candidates.into_iter().find(|c| (c.theta - t).abs() < RECT_TOLERANCE).map(|c| RotatedRect { theta: t, ..c }),
        None => candidates
            .into_iter()
            .filter(|c| c.theta.abs() < std::f64::consts::FRAC_PI_2)
            .min_by(|a, b| a.theta.abs().total_cmp(&b.theta.abs())),
    };
    let rect = chosen.ok_or_else(|| format!("theta {theta:?} is inconsistent with the vertices"))?;
    rect.validate(RECT_TOLERANCE).map_err(|e| e.to_string())?;
    Ok(rect)
}

pub fn parse_polygons_json(text: &str) -> Result<Vec<RotatedRect>, MapsError> {
    let records: Vec<PolygonRecord> = serde_json::from_str(text)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let pts = r.vertices.map(|[x, y]| Point::new(x, y));
            relabel(pts, r.theta).map_err(|message| MapsError::Parse { line: i + 1, message: format!("polygon {}: {message}", i + 1) })
        })
        .collect()
}

pub fn write_polygons_json(rects: &[RotatedRect]) -> String {
    let records: Vec<PolygonRecord> = rects.iter().map(|r| PolygonRecord { vertices: r.vertices.map(|p| [p.x, p.y]), theta: Some(r.theta) }).collect();
    serde_json::to_string_pretty(&records).expect("plain data serialises")
}
