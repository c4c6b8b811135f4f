//! Ground-truth map encoding, synthetic scenes, augmentation and annotation
//! ingestion.

pub mod annotations;
pub mod augment;
pub mod dataset;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::geom::{GeomError, Point, RotatedRect};
use crate::tensor::{Tensor, TensorError};

pub use annotations::{parse_axis_aligned, parse_axis_boxes, parse_polygons_json, write_axis_boxes, write_polygons_json, AxisBox};
pub use augment::{augment, color_jitter, mirror, translate_crop, AugmentOptions};
pub use dataset::{load_dataset, load_png, save_png, write_dataset, Manifest, ManifestEntry};
pub use synth::{synth_scene, SynthSpec};

#[derive(Debug, Error)]
pub enum MapsError {
    #[error("maps configuration: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("annotation json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One image with its annotations. `image` is `3xSxS` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f64>,
    pub annotations: Vec<RotatedRect>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Per-image training targets at one stride: score, rotation and mask are
/// `1xhxw`, distance is `4xhxw` (top, right, bottom, left) in input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMaps {
    pub score: Tensor<f64>,
    pub rotation: Tensor<f64>,
    pub distance: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub stride: usize,
}

impl GroundTruthMaps {
    pub fn side(&self) -> usize {
        self.score.shape()[2]
    }

    pub fn positives(&self) -> usize {
        self.mask.data().iter().filter(|v| **v > 0.0).count()
    }
}

/// Centre of map pixel `(row, col)` in input pixels.
pub fn pixel_center(row: usize, col: usize, stride: usize) -> Point {
    let s = stride as f64;
    Point::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
}

/// Whether `p` lies inside `r` shrunk by `shrink` of its width/height per side.
pub fn in_shrunk(r: &RotatedRect, p: Point, shrink: f64) -> Option<[f64; 4]> {
    let d = r.distances_from(p);
    let (mw, mh) = (shrink * r.width(), shrink * r.height());
    (d[0] >= mh && d[2] >= mh && d[1] >= mw && d[3] >= mw).then_some(d)
}

/// Encodes annotations as targets at `stride`. A pixel is positive when its
/// centre lies inside an annotation shrunk by `shrink` per side; it then holds
/// that annotation's angle and the distances to its (unshrunk) edges. Where
/// annotations overlap the smaller one wins.
pub fn encode_ground_truth(annotations: &[RotatedRect], image_size: usize, stride: usize, shrink: f64) -> Result<GroundTruthMaps, MapsError> {
    if !(0.0..0.5).contains(&shrink) {
        return Err(MapsError::Config(format!("shrink must be in [0, 0.5), got {shrink}")));
    }
    if stride == 0 || !image_size.is_multiple_of(stride) {
        return Err(MapsError::Config(format!("stride {stride} does not divide image size {image_size}")));
    }
    let side = image_size / stride;
    let plane = side * side;
    let mut score = vec![0.0; plane];
    let mut rotation = vec![0.0; plane];
    let mut distance = vec![0.0; 4 * plane];
    let mut order: Vec<usize> = (0..annotations.len()).collect();
    order.sort_by(|&a, &b| annotations[a].area().total_cmp(&annotations[b].area()));
    let s = stride as f64;
    for i in order {
        let r = &annotations[i];
        let (x0, y0, x1, y1) = r.bounds();
        let lo = |v: f64| ((v / s - 0.5).floor().max(0.0) as usize).min(side);
        let hi = |v: f64| ((v / s - 0.5).ceil().max(-1.0) + 1.0).clamp(0.0, side as f64) as usize;
        for row in lo(y0)..hi(y1) {
            for col in lo(x0)..hi(x1) {
                let k = row * side + col;
                if score[k] > 0.0 {
                    continue;
                }
                if let Some(d) = in_shrunk(r, pixel_center(row, col, stride), shrink) {
                    score[k] = 1.0;
                    rotation[k] = r.theta;
                    for (c, v) in d.iter().enumerate() {
                        distance[c * plane + k] = v.max(0.0);
                    }
                }
            }
        }
    }
    Ok(GroundTruthMaps {
        mask: Tensor::new(vec![1, side, side], score.clone())?,
        score: Tensor::new(vec![1, side, side], score)?,
        rotation: Tensor::new(vec![1, side, side], rotation)?,
        distance: Tensor::new(vec![4, side, side], distance)?,
        stride,
    })
}
