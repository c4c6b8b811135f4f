//! Training loop: Adam with a staircase exponential learning rate, seeded
//! batching and augmentation, metrics rows and checkpoints.
//!
//! Data order is a pure function of `(seed, iteration)`: draw `k` (the k-th
//! sample consumed since iteration 0) belongs to epoch `k / n`, whose
//! permutation is seeded by `(seed, epoch)`, and is augmented with an RNG
//! seeded by `(seed, k)`. A checkpoint therefore only needs the iteration
//! count to resume the exact stream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loss::{multiscale_loss, LossBreakdown, LossError, LossWeights, ScaleTargets};
use crate::maps::{augment, encode_ground_truth, AugmentOptions, MapsError, Sample};
use crate::net::{NetError, NetworkSpec, ParamSet, Sifcn, ALL_SCALES};
use crate::tensor::store::{StoreError, TensorStore};
use crate::tensor::{Graph, Precision, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for {param} at iteration {iteration}")]
    NonFinite { iteration: usize, param: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Maps(#[from] MapsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub input_size: usize,
    /// Per-side shrink of the positive region in the targets.
    pub shrink: f64,
    #[serde(default)]
    pub augment: AugmentOptions,
    /// Save a checkpoint every this many iterations (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lr0: 1e-4,
            decay_rate: 0.94,
            decay_every: 10_000,
            batch_size: 4,
            max_iters: 2000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            input_size: 64,
            shrink: 0.3,
            augment: AugmentOptions::default(),
            checkpoint_every: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if !(0.0..0.5).contains(&self.shrink) {
            return bad(format!("shrink must lie in [0, 0.5), got {}", self.shrink));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input_size {} is not a positive multiple of 32", self.input_size));
        }
        Ok(())
    }

    /// Hash of every field that shapes the optimisation trajectory (the
    /// iteration budget and checkpoint cadence are excluded).
    pub fn trajectory_hash(&self) -> String {
        let mut s = self.clone();
        s.max_iters = 0;
        s.checkpoint_every = 0;
        hash_json(&s)
    }
}

fn hash_json<S: Serialize>(v: &S) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("plain data serialises")))
}

/// `lr0 * decay_rate ^ floor(iter / decay_every)`.
pub fn lr_schedule(iter: usize, spec: &TrainSpec) -> f64 {
    spec.lr0 * spec.decay_rate.powi((iter / spec.decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        let mut m = ParamSet::new();
        for (k, t) in params.iter() {
            m.insert(k.clone(), Tensor::zeros(t.shape()));
        }
        AdamState { step: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified; parameters without a gradient are left alone.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    spec: &TrainSpec,
    iteration: usize,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFinite { iteration, param: name.clone() });
        }
        let p = params.get(name).ok_or_else(|| TrainError::Config(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!("gradient shape {:?} for {name} {:?}", g.shape(), p.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (spec.adam_beta1, spec.adam_beta2);
    let c1 = T::from_f64_lossy(1.0 - b1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - b2.powi(t));
    let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (one, lr_t, eps) = (T::one(), T::from_f64_lossy(lr), T::from_f64_lossy(spec.adam_eps));
    for name in grads.keys() {
        if state.m.get(name).is_none() || state.v.get(name).is_none() {
            return Err(TrainError::Checkpoint(format!("no optimizer moments for {name}")));
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked").data_mut();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mi = b1t * *mi + (one - b1t) * gi;
            *vi = b2t * *vi + (one - b2t) * gi * gi;
            *pi -= lr_t * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Sample index and draw number for each batch slot of `iteration`.
pub fn batch_draws(n_samples: usize, batch_size: usize, iteration: usize, seed: u64) -> Vec<(usize, u64)> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch_size)
        .map(|j| {
            let k = (iteration * batch_size + j) as u64;
            let epoch = k / n_samples as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cache = Some((epoch, epoch_permutation(n_samples, seed, epoch)));
            }
            let perm = &cache.as_ref().expect("filled").1;
            (perm[(k % n_samples as u64) as usize], k)
        })
        .collect()
}

pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Augmentation RNG of draw `k`.
pub fn draw_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(k);
    rng
}

/// Targets for every scale in `scales`, stacked over the batch.
pub fn encode_targets<T: Real>(samples: &[Sample], scales: &[u8], input_size: usize, shrink: f64) -> Result<BTreeMap<u8, ScaleTargets<T>>, TrainError> {
    let mut out = BTreeMap::new();
    for &s in scales {
        let stride = NetworkSpec::scale_stride(s);
        let maps = samples.iter().map(|x| encode_ground_truth(&x.annotations, input_size, stride, shrink)).collect::<Result<Vec<_>, _>>()?;
        out.insert(s, ScaleTargets::from_maps(&maps)?);
    }
    Ok(out)
}

pub fn stack_images<T: Real>(samples: &[Sample]) -> Result<Tensor<T>, TensorError> {
    Tensor::stack(&samples.iter().map(|s| s.image.cast()).collect::<Vec<_>>())
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl MetricsRow {
    pub fn csv_header() -> String {
        let mut h = String::from("iteration,lr,total");
        for s in ALL_SCALES {
            for t in ["score", "rotation", "distance"] {
                h.push_str(&format!(",s{s}_{t}"));
            }
        }
        h
    }

    /// Values in shortest round-trip form; scales outside the loss are empty.
    pub fn to_csv(&self) -> String {
        let mut line = format!("{},{},{}", self.iteration, self.lr, self.loss.total);
        for s in ALL_SCALES {
            match self.loss.per_scale.get(&s) {
                Some(t) => line.push_str(&format!(",{},{},{}", t.score, t.rotation, t.distance)),
                None => line.push_str(",,,"),
            }
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Number of completed iterations.
    pub iteration: usize,
    pub params: ParamSet<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(net: &Sifcn, seed: u64) -> Self {
        let params = net.init_params(seed);
        TrainState { iteration: 0, adam: AdamState::zeros_like(&params), params }
    }
}

pub struct Trainer<'a> {
    pub net: &'a Sifcn,
    pub spec: &'a TrainSpec,
    pub weights: &'a LossWeights,
    pub data: &'a [Sample],
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a Sifcn, spec: &'a TrainSpec, weights: &'a LossWeights, data: &'a [Sample]) -> Result<Self, TrainError> {
        spec.validate()?;
        weights.validate()?;
        if spec.input_size != net.spec().input_size {
            return Err(TrainError::Config(format!("train input_size {} differs from network input_size {}", spec.input_size, net.spec().input_size)));
        }
        if let Some(s) = weights.scale_set.iter().find(|s| !net.spec().has_head(**s)) {
            return Err(TrainError::Config(format!("loss scale {s} has no head in the network")));
        }
        if data.is_empty() {
            return Err(TrainError::Config("training data is empty".into()));
        }
        if let Some(s) = data.iter().find(|s| s.image.shape() != [3, spec.input_size, spec.input_size]) {
            return Err(TrainError::Config(format!("sample {} has shape {:?}, expected 3x{n}x{n}", s.id, s.image.shape(), n = spec.input_size)));
        }
        Ok(Trainer { net, spec, weights, data })
    }

    /// The augmented samples of `iteration`.
    pub fn batch(&self, iteration: usize) -> Vec<Sample> {
        batch_draws(self.data.len(), self.spec.batch_size, iteration, self.spec.seed)
            .into_iter()
            .map(|(i, k)| augment(&self.data[i], &mut draw_rng(self.spec.seed, k), &self.spec.augment))
            .collect()
    }

    /// Loss and parameter gradients on a batch, without updating anything.
    pub fn loss_and_grads<T: Real>(&self, params: &ParamSet<T>, batch: &[Sample]) -> Result<(LossBreakdown, BTreeMap<String, Tensor<T>>), TrainError> {
        let images = stack_images::<T>(batch)?;
        let targets = encode_targets::<T>(batch, &self.weights.scale_set, self.spec.input_size, self.spec.shrink)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let x = g.constant(images);
        let maps = self.net.forward(&mut g, x, &bound)?;
        let (total, breakdown) = multiscale_loss(&mut g, &maps, &targets, self.weights)?;
        g.backward(total)?;
        let grads = bound.iter().filter_map(|(k, v)| g.grad(*v).map(|t| (k.clone(), t.clone()))).collect();
        Ok((breakdown, grads))
    }

    /// Runs one iteration on `state` and returns its metrics.
    pub fn step<T: Real>(&self, state: &mut TrainState<T>) -> Result<MetricsRow, TrainError> {
        let it = state.iteration;
        let lr = lr_schedule(it, self.spec);
        let batch = self.batch(it);
        let (loss, grads) = self.loss_and_grads(&state.params, &batch)?;
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite { iteration: it, param: "loss".into() });
        }
        adam_step(&mut state.params, &grads, &mut state.adam, lr, self.spec, it)?;
        state.iteration += 1;
        Ok(MetricsRow { iteration: it, lr, loss })
    }

    /// Runs until `state.iteration == until`, calling `on_step` after each
    /// iteration with the updated state.
    pub fn run<T: Real>(
        &self,
        state: &mut TrainState<T>,
        until: usize,
        mut on_step: impl FnMut(&TrainState<T>, &MetricsRow) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while state.iteration < until {
            let row = self.step(state)?;
            on_step(state, &row)?;
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "sifcn-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub iteration: usize,
    pub seed: u64,
    pub adam_step: u64,
    pub precision: Precision,
    pub network: NetworkSpec,
    pub train_hash: String,
    pub loss_hash: String,
}

impl CheckpointMeta {
    pub fn new<T: Real>(state: &TrainState<T>, net: &NetworkSpec, spec: &TrainSpec, weights: &LossWeights) -> Self {
        CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            iteration: state.iteration,
            seed: spec.seed,
            adam_step: state.adam.step,
            precision: spec.precision,
            network: net.clone(),
            train_hash: spec.trajectory_hash(),
            loss_hash: hash_json(weights),
        }
    }

    /// Whether a run configured as given may continue from this checkpoint.
    pub fn check_compatible(&self, net: &NetworkSpec, spec: &TrainSpec, weights: &LossWeights) -> Result<(), TrainError> {
        if &self.network != net {
            return Err(TrainError::Checkpoint("network spec differs from the checkpoint".into()));
        }
        if self.train_hash != spec.trajectory_hash() {
            return Err(TrainError::Checkpoint("train spec differs from the checkpoint (only max_iters and checkpoint_every may change)".into()));
        }
        if self.loss_hash != hash_json(weights) {
            return Err(TrainError::Checkpoint("loss weights differ from the checkpoint".into()));
        }
        Ok(())
    }
}

pub const PARAM_PREFIX: &str = "param.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";

pub fn save_checkpoint<T: Real>(path: &Path, state: &TrainState<T>, meta: &CheckpointMeta) -> Result<(), TrainError> {
    let mut store = TensorStore::new(serde_json::to_string(meta).expect("plain data serialises"));
    state.params.write_into(&mut store, PARAM_PREFIX);
    state.adam.m.write_into(&mut store, ADAM_M_PREFIX);
    state.adam.v.write_into(&mut store, ADAM_V_PREFIX);
    store.save(path)?;
    Ok(())
}

pub fn read_checkpoint_meta(store: &TensorStore) -> Result<CheckpointMeta, TrainError> {
    let meta: CheckpointMeta = serde_json::from_str(&store.metadata).map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Checkpoint(format!("unknown format {:?}", meta.format)));
    }
    Ok(meta)
}

/// Loads a checkpoint and checks its parameters against the network layout.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(CheckpointMeta, TrainState<T>), TrainError> {
    let store = TensorStore::load(path)?;
    let meta = read_checkpoint_meta(&store)?;
    let net = Sifcn::new(meta.network.clone())?;
    let specs = net.param_specs();
    let params = ParamSet::<T>::read_from(&store, PARAM_PREFIX);
    params.check(&specs)?;
    let m = ParamSet::<T>::read_from(&store, ADAM_M_PREFIX);
    let v = ParamSet::<T>::read_from(&store, ADAM_V_PREFIX);
    m.check(&specs)?;
    v.check(&specs)?;
    let state = TrainState { iteration: meta.iteration, params, adam: AdamState { step: meta.adam_step, m, v } };
    Ok((meta, state))
}
