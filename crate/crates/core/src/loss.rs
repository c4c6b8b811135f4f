//! Score (dice), rotation (cosine) and distance (IoU) losses and their
//! weighted multi-scale aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maps::GroundTruthMaps;
use crate::net::{MapVars, ALL_SCALES};
use crate::tensor::{nested_weighted_sum, Graph, Real, Tensor, TensorError, Var};

/// Smoothing constant of the dice ratio.
pub const DICE_EPS: f64 = 1e-8;
/// Guard inside the IoU logarithm.
pub const IOU_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss configuration: {0}")]
    Config(String),
    #[error("no {what} for scale {scale}")]
    MissingScale { what: &'static str, scale: u8 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Weight `w_s` of scales 1..=4.
    pub scale_weights: [f64; 4],
    pub scale_set: Vec<u8>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.01, beta: 20.0, scale_weights: [1.0; 4], scale_set: ALL_SCALES.to_vec() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.alpha, self.beta].into_iter().chain(self.scale_weights);
        if all.clone().any(|w| !w.is_finite() || w < 0.0) {
            return Err(LossError::Config("loss weights must be finite and non-negative".into()));
        }
        if self.scale_set.is_empty() {
            return Err(LossError::Config("scale_set must not be empty".into()));
        }
        if let Some(s) = self.scale_set.iter().find(|s| !ALL_SCALES.contains(s)) {
            return Err(LossError::Config(format!("scale_set: unknown scale {s}")));
        }
        let mut sorted = self.scale_set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.scale_set.len() {
            return Err(LossError::Config("scale_set contains duplicates".into()));
        }
        Ok(())
    }

    pub fn weight(&self, scale: u8) -> f64 {
        self.scale_weights[scale as usize - 1]
    }
}

/// Unweighted loss terms of one scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValues {
    pub score: f64,
    pub rotation: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_scale: BTreeMap<u8, TermValues>,
}

impl LossBreakdown {
    /// `sum_s w_s (alpha * score + beta * rotation + distance)` over the
    /// recorded scales, folded in the same order as the graph's total.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let groups: Vec<_> = self
            .per_scale
            .iter()
            .map(|(s, t)| (w.weight(*s), vec![(w.alpha, t.score), (w.beta, t.rotation), (1.0, t.distance)]))
            .collect();
        nested_weighted_sum(&groups)
    }
}

/// Batched targets of one scale: score/mask/rotation `Bx1xhxw`, distance `Bx4xhxw`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets<T> {
    pub score: Tensor<T>,
    pub rotation: Tensor<T>,
    pub distance: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> ScaleTargets<T> {
    /// Stacks per-image ground truth maps (all of one stride) into a batch.
    pub fn from_maps(maps: &[GroundTruthMaps]) -> Result<Self, TensorError> {
        let cast = |f: fn(&GroundTruthMaps) -> &Tensor<f64>| -> Result<Tensor<T>, TensorError> {
            Tensor::stack(&maps.iter().map(|m| f(m).cast()).collect::<Vec<_>>())
        };
        Ok(ScaleTargets {
            score: cast(|m| &m.score)?,
            rotation: cast(|m| &m.rotation)?,
            distance: cast(|m| &m.distance)?,
            mask: cast(|m| &m.mask)?,
        })
    }
}

/// Graph nodes of the three unweighted terms of one scale.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub score: Var,
    pub rotation: Var,
    pub distance: Var,
}

pub fn scale_terms<T: Real>(g: &mut Graph<T>, pred: &MapVars, gt: &ScaleTargets<T>) -> Result<TermVars, LossError> {
    Ok(TermVars {
        score: g.dice_loss(pred.score, &gt.score, T::from_f64_lossy(DICE_EPS))?,
        rotation: g.rotation_loss(pred.rotation, &gt.rotation, &gt.mask)?,
        distance: g.iou_loss(pred.distance, &gt.distance, &gt.mask, T::from_f64_lossy(IOU_EPS))?,
    })
}

/// Builds the multi-scale loss on the graph. Returns the scalar total node and
/// the per-term values.
pub fn multiscale_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &BTreeMap<u8, MapVars>,
    gts: &BTreeMap<u8, ScaleTargets<T>>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown), LossError> {
    w.validate()?;
    let mut scales = w.scale_set.clone();
    scales.sort_unstable();
    let (alpha, beta) = (T::from_f64_lossy(w.alpha), T::from_f64_lossy(w.beta));
    let mut groups = Vec::with_capacity(scales.len());
    let mut per_scale = BTreeMap::new();
    for s in scales {
        let pred = preds.get(&s).ok_or(LossError::MissingScale { what: "prediction", scale: s })?;
        let gt = gts.get(&s).ok_or(LossError::MissingScale { what: "ground truth", scale: s })?;
        let t = scale_terms(g, pred, gt)?;
        let value = |v: Var| g.value(v).data()[0].as_f64();
        per_scale.insert(s, TermValues { score: value(t.score), rotation: value(t.rotation), distance: value(t.distance) });
        groups.push((T::from_f64_lossy(w.weight(s)), vec![(t.score, alpha), (t.rotation, beta), (t.distance, T::one())]));
    }
    let total = g.nested_sum(groups)?;
    let breakdown = LossBreakdown { total: g.value(total).data()[0].as_f64(), per_scale };
    Ok((total, breakdown))
}
