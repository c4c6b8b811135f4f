//! Detection evaluation: greedy matching, all-points AP, recall averaged over
//! log-spaced false-positives-per-image points, and height-level filtering.
//!
//! Matching visits detections by descending score (ties in input order). A
//! detection takes the unmatched, non-ignored ground truth with the highest
//! IoU (first index on ties) if that IoU reaches the threshold and becomes a
//! true positive. Otherwise it is ignored if it reaches the threshold against
//! an ignored ground truth, and is a false positive if not.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{iou, RotatedRect};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("evaluation configuration: {0}")]
    Config(String),
    #[error("{detections} detection lists for {images} images")]
    Mismatch { detections: usize, images: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub name: String,
    /// Ground truths shorter than this (in pixels) are ignored.
    pub min_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub iou_threshold: f64,
    pub levels: Vec<Level>,
    pub ar_fppi_points: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            iou_threshold: 0.5,
            levels: vec![Level { name: "level1".into(), min_height: 70.0 }, Level { name: "level2".into(), min_height: 25.0 }],
            ar_fppi_points: 9,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(EvalError::Config(format!("iou_threshold {} must lie in (0, 1)", self.iou_threshold)));
        }
        if self.levels.is_empty() {
            return Err(EvalError::Config("at least one level is required".into()));
        }
        for l in &self.levels {
            if !(l.min_height > 0.0 && l.min_height.is_finite()) {
                return Err(EvalError::Config(format!("level {}: min_height must be positive", l.name)));
            }
            if l.name.is_empty() || l.name.contains(|c: char| c == ',' || c.is_whitespace()) {
                return Err(EvalError::Config(format!("level name {:?} must be non-empty without commas or spaces", l.name)));
            }
        }
        if self.ar_fppi_points == 0 {
            return Err(EvalError::Config("ar_fppi_points must be positive".into()));
        }
        Ok(())
    }

    /// `ar_fppi_points` values evenly spaced in log10 between 1e-2 and 1.
    pub fn fppi_points(&self) -> Vec<f64> {
        let n = self.ar_fppi_points;
        if n == 1 {
            return vec![1.0];
        }
        (0..n).map(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (n - 1) as f64)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchFlag {
    Tp,
    Fp,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One flag per detection, in input order.
    pub det_flags: Vec<MatchFlag>,
    pub gt_matched: Vec<bool>,
}

/// Detection indices by descending score, ties in input order.
pub fn score_order(dets: &[RotatedRect]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

pub fn match_detections(dets: &[RotatedRect], gts: &[RotatedRect], ignore: &[bool], iou_threshold: f64) -> MatchResult {
    let mut det_flags = vec![MatchFlag::Fp; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for d in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (j, g) in gts.iter().enumerate() {
            let o = iou(&dets[d], g);
            if o < iou_threshold {
                continue;
            }
            if ignore[j] {
                hits_ignored = true;
            } else if !gt_matched[j] && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        det_flags[d] = match best {
            Some((j, _)) => {
                gt_matched[j] = true;
                MatchFlag::Tp
            }
            None if hits_ignored => MatchFlag::Ignored,
            None => MatchFlag::Fp,
        };
    }
    MatchResult { det_flags, gt_matched }
}

/// Ignore flags for ground truths shorter than `min_height`.
pub fn filter_level(gts: &[RotatedRect], min_height: f64) -> Vec<bool> {
    gts.iter().map(|g| g.vertical_extent() < min_height).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Scored true/false-positive flags (ignored detections already removed),
/// sorted by descending score with stable ties.
pub fn rank(scored: &[(f64, bool)]) -> Vec<(f64, bool)> {
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

/// Raw precision/recall after each ranked detection.
pub fn pr_curve(ranked: &[(f64, bool)], n_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    ranked
        .iter()
        .enumerate()
        .map(|(i, (s, hit))| {
            tp += *hit as usize;
            PrPoint { score: *s, recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 }, precision: tp as f64 / (i + 1) as f64 }
        })
        .collect()
}

/// All-points AP over ranked flags: the precision envelope (running maximum
/// from the right) integrated over recall steps. With no ground truth AP is 1
/// without detections and 0 with any.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if ranked_tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = ranked_tp
        .iter()
        .enumerate()
        .map(|(i, hit)| {
            tp += *hit as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    // summing before dividing keeps a perfect ranking at exactly 1
    ranked_tp.iter().zip(&envelope).filter(|(hit, _)| **hit).map(|(_, p)| p).sum::<f64>() / n_gt as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FppiPoint {
    pub fppi: f64,
    pub recall: f64,
}

/// Recall at each FPPI point and their mean. Operating points are score
/// thresholds between distinct scores; at each FPPI bound the lowest
/// threshold whose false positives per image stay within the bound is used.
/// With no ground truth the recall is defined as 1.
pub fn average_recall_fppi(ranked: &[(f64, bool)], n_images: usize, n_gt: usize, spec: &EvalSpec) -> (f64, Vec<FppiPoint>) {
    let points = spec.fppi_points();
    if n_gt == 0 {
        return (1.0, points.iter().map(|&f| FppiPoint { fppi: f, recall: 1.0 }).collect());
    }
    let images = n_images.max(1) as f64;
    // (fp, tp) after each complete group of equal scores, starting from the empty prefix
    let mut ops = vec![(0usize, 0usize)];
    let (mut fp, mut tp) = (0, 0);
    for (i, (s, hit)) in ranked.iter().enumerate() {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if ranked.get(i + 1).is_none_or(|(next, _)| next != s) {
            ops.push((fp, tp));
        }
    }
    let curve: Vec<FppiPoint> = points
        .iter()
        .map(|&f| {
            let tp = ops.iter().filter(|(fp, _)| *fp as f64 / images <= f).map(|(_, tp)| *tp).max().unwrap_or(0);
            FppiPoint { fppi: f, recall: tp as f64 / n_gt as f64 }
        })
        .collect();
    let ar = curve.iter().map(|p| p.recall).sum::<f64>() / curve.len() as f64;
    (ar, curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub name: String,
    pub min_height: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_ignored_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub ap: f64,
    pub ar: f64,
    pub pr: Vec<PrPoint>,
    pub fppi: Vec<FppiPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub levels: Vec<LevelReport>,
}

impl EvalReport {
    pub fn level(&self, name: &str) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.name == name)
    }
}

/// Evaluates per-image detections against per-image ground truth.
pub fn evaluate(dets: &[Vec<RotatedRect>], gts: &[Vec<RotatedRect>], spec: &EvalSpec) -> Result<EvalReport, EvalError> {
    spec.validate()?;
    if dets.len() != gts.len() {
        return Err(EvalError::Mismatch { detections: dets.len(), images: gts.len() });
    }
    let levels = spec
        .levels
        .iter()
        .map(|level| {
            let mut scored = Vec::new();
            let (mut n_gt, mut n_ignored) = (0, 0);
            for (d, g) in dets.iter().zip(gts) {
                let ignore = filter_level(g, level.min_height);
                n_ignored += ignore.iter().filter(|i| **i).count();
                n_gt += ignore.iter().filter(|i| !**i).count();
                let m = match_detections(d, g, &ignore, spec.iou_threshold);
                for (r, f) in d.iter().zip(&m.det_flags) {
                    if *f != MatchFlag::Ignored {
                        scored.push((r.score, *f == MatchFlag::Tp));
                    }
                }
            }
            let ranked = rank(&scored);
            let flags: Vec<bool> = ranked.iter().map(|(_, t)| *t).collect();
            let tp = flags.iter().filter(|t| **t).count();
            let (ar, fppi) = average_recall_fppi(&ranked, gts.len(), n_gt, spec);
            LevelReport {
                name: level.name.clone(),
                min_height: level.min_height,
                n_images: gts.len(),
                n_gt,
                n_ignored_gt: n_ignored,
                tp,
                fp: flags.len() - tp,
                ap: average_precision(&flags, n_gt),
                ar,
                pr: pr_curve(&ranked, n_gt),
                fppi,
            }
        })
        .collect();
    Ok(EvalReport { iou_threshold: spec.iou_threshold, levels })
}
