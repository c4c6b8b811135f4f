//! Shared helpers of the integration suites: the finite-difference gradient
//! checker with its per-op case generators, and the seeded toy experiments.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sifcn::config::ExperimentConfig;
use sifcn::net::{cwf_block, output_head, uf_block, BlockVars, ConvVars};
use sifcn::tensor::{Graph, Tensor, TensorError, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Bound on the relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const CASES_PER_OP: usize = 20;

pub type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One gradient-check instance: differentiable inputs and the expression
/// built from them (any output shape).
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

fn eval(case: &Case, inputs: &[Tensor<f64>], projection: Option<&Tensor<f64>>) -> (f64, Tensor<f64>, Vec<Option<Tensor<f64>>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars).expect("case builds");
    let shape = g.value(out).shape().to_vec();
    let proj = match projection {
        Some(p) => p.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64 ^ 0x5eed);
            Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
        }
    };
    let c = g.constant(proj.clone());
    let weighted = g.mul(out, c).expect("projection matches output shape");
    let loss = g.sum(weighted);
    let value = g.value(loss).data()[0];
    g.backward(loss).expect("scalar loss");
    let grads = vars.iter().map(|v| g.grad(*v).cloned()).collect();
    (value, proj, grads)
}

/// Largest relative error, over the case's inputs, between the analytic
/// gradient of a random projection of the output and its central
/// finite-difference estimate. The error of one input is
/// `|g_a - g_n|_2 / max(|g_a|_2, |g_n|_2)`, or the absolute difference when
/// both norms vanish.
pub fn max_relative_error(case: &Case) -> f64 {
    let (_, proj, grads) = eval(case, &case.inputs, None);
    let mut worst: f64 = 0.0;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads[i].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut shifted = case.inputs.to_vec();
            shifted[i].data_mut()[k] = input.data()[k] + FD_STEP;
            let plus = eval(case, &shifted, Some(&proj)).0;
            shifted[i].data_mut()[k] = input.data()[k] - FD_STEP;
            let minus = eval(case, &shifted, Some(&proj)).0;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let diff = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let scale = na.max(nn);
        worst = worst.max(if scale < 1e-12 { diff } else { diff / scale });
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so relu kinks are never crossed by the
/// finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

fn binary_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3))
}

fn case(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static) -> Case {
    Case { inputs, build: Box::new(build) }
}

fn conv_vars(v: &[Var], at: usize) -> ConvVars {
    ConvVars { weight: v[at], bias: v[at + 1] }
}

/// Random cases for the named op.
pub fn cases(op: &str, seed: u64, n: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| make_case(op, &mut rng)).collect()
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let (b, c, h, w) = dims(rng);
    let s = [b, c, h, w];
    match op {
        "conv2d" => {
            let k = rng.gen_range(1..=3);
            let kernel = if rng.gen_bool(0.5) { 3 } else { 1 };
            let stride = rng.gen_range(1..=2);
            let padding = if kernel == 3 { rng.gen_range(0..=1) } else { 0 };
            let (h, w) = (h.max(3), w.max(3));
            let inputs = vec![uniform(rng, &[b, c, h, w], -1.0, 1.0), uniform(rng, &[k, c, kernel, kernel], -1.0, 1.0), uniform(rng, &[k], -0.5, 0.5)];
            case(inputs, move |g, v| g.conv2d(v[0], v[1], v[2], stride, padding))
        }
        "maxpool2" => {
            // distinct values with gaps far above the step: a shuffled ramp
            let n = b * c * h * w;
            let mut ramp: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
            for i in (1..n).rev() {
                ramp.swap(i, rng.gen_range(0..=i));
            }
            case(vec![Tensor::new(s.to_vec(), ramp).unwrap()], |g, v| g.maxpool2(v[0]))
        }
        "upsample" => {
            let f = rng.gen_range(1..=4);
            case(vec![uniform(rng, &s, -1.0, 1.0)], move |g, v| g.upsample(v[0], f))
        }
        "add" => case(vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], |g, v| g.add(v[0], v[1])),
        "sub" => case(vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], |g, v| g.sub(v[0], v[1])),
        "mul" => case(vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], |g, v| g.mul(v[0], v[1])),
        "relu" => case(vec![away_from_zero(rng, &s)], |g, v| Ok(g.relu(v[0]))),
        "sigmoid" => case(vec![uniform(rng, &s, -4.0, 4.0)], |g, v| Ok(g.sigmoid(v[0]))),
        "tanh" => case(vec![uniform(rng, &s, -2.0, 2.0)], |g, v| Ok(g.tanh(v[0]))),
        "scalar_affine" => {
            let (a, o) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
            case(vec![uniform(rng, &s, -1.0, 1.0)], move |g, v| Ok(g.scalar_affine(v[0], a, o)))
        }
        "concat_channels" => {
            let c2 = rng.gen_range(1..=3);
            case(vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[b, c2, h, w], -1.0, 1.0)], |g, v| g.concat_channels(v[0], v[1]))
        }
        "slice_channels" => {
            let c = c + 1;
            let start = rng.gen_range(0..c);
            let len = rng.gen_range(1..=c - start);
            case(vec![uniform(rng, &[b, c, h, w], -1.0, 1.0)], move |g, v| g.slice_channels(v[0], start, len))
        }
        "sum" => case(vec![uniform(rng, &s, -1.0, 1.0)], |g, v| Ok(g.sum(v[0]))),
        "dice_loss" => {
            let target = binary_mask(rng, &[b, 1, h, w], 0.4);
            let eps = 1e-8;
            case(vec![uniform(rng, &[b, 1, h, w], 0.05, 0.95)], move |g, v| g.dice_loss(v[0], &target, eps))
        }
        "rotation_loss" => {
            let target = uniform(rng, &[b, 1, h, w], -1.5, 1.5);
            let mask = binary_mask(rng, &[b, 1, h, w], 0.6);
            case(vec![uniform(rng, &[b, 1, h, w], -1.5, 1.5)], move |g, v| g.rotation_loss(v[0], &target, &mask))
        }
        "iou_loss" => {
            let target = uniform(rng, &[b, 4, h, w], 0.5, 10.0);
            // keep every prediction at least 0.05 px from its target so the
            // min() in the intersection never switches under the step
            let pred = Tensor::from_fn(&[b, 4, h, w], |k| {
                let t = target.data()[k];
                let d = rng.gen_range(0.05..4.0);
                if rng.gen_bool(0.5) || t - d < 0.2 { t + d } else { t - d }
            });
            let mask = binary_mask(rng, &[b, 1, h, w], 0.6);
            case(vec![pred], move |g, v| g.iou_loss(v[0], &target, &mask, 1e-8))
        }
        "box_upsample" => {
            let factor = rng.gen_range(2..=4);
            let pixel = rng.gen_range(1..=4) as f64;
            // distances far from the clamps at 0 and dmax
            let inputs = vec![uniform(rng, &[b, 4, h, w], 12.0, 30.0), uniform(rng, &[b, 1, h, w], -1.5, 1.5)];
            case(inputs, move |g, v| g.box_upsample(v[0], v[1], factor, pixel, 100.0))
        }
        "nested_sum" => {
            let n = rng.gen_range(2..=5);
            let groups: Vec<(f64, Vec<f64>)> = (0..rng.gen_range(1..=3)).map(|_| (rng.gen_range(0.1..3.0), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())).collect();
            let inputs = (0..n).map(|_| uniform(rng, &[], -1.0, 1.0)).collect();
            case(inputs, move |g, v| g.nested_sum(groups.iter().map(|(w, cs)| (*w, v.iter().copied().zip(cs.iter().copied()).collect())).collect()))
        }
        "uf_block" | "cwf_block" => {
            let (cu, cf, cr, cm) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (hh, ww) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let mut inputs = vec![
                uniform(rng, &[b, cu, hh, ww], -1.0, 1.0),
                uniform(rng, &[b, cf, 2 * hh, 2 * ww], -1.0, 1.0),
                uniform(rng, &[cr, cu + cf, 1, 1], -1.0, 1.0),
                uniform(rng, &[cr], -0.2, 0.2),
                uniform(rng, &[cm, cr, 3, 3], -1.0, 1.0),
                uniform(rng, &[cm], -0.2, 0.2),
            ];
            if op == "uf_block" {
                case(inputs, |g, v| {
                    let p = BlockVars { weighting: None, reduce: conv_vars(v, 2), merge: conv_vars(v, 4) };
                    uf_block(g, v[0], v[1], &p).map_err(unwrap_tensor)
                })
            } else {
                inputs.push(uniform(rng, &[cf, cu, 1, 1], -1.0, 1.0));
                inputs.push(uniform(rng, &[cf], -0.2, 0.2));
                case(inputs, |g, v| {
                    let p = BlockVars { weighting: Some(conv_vars(v, 6)), reduce: conv_vars(v, 2), merge: conv_vars(v, 4) };
                    cwf_block(g, v[0], v[1], &p).map_err(unwrap_tensor)
                })
            }
        }
        "output_head" => {
            let inputs = vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[6, c, 1, 1], -1.0, 1.0), uniform(rng, &[6], -0.5, 0.5)];
            let channel = rng.gen_range(0..3);
            case(inputs, move |g, v| {
                let m = output_head(g, v[0], 40.0, conv_vars(v, 1), 1).map_err(unwrap_tensor)?;
                Ok([m.score, m.rotation, m.distance][channel])
            })
        }
        other => panic!("no gradient cases for {other}"),
    }
}

fn unwrap_tensor(e: sifcn::net::NetError) -> TensorError {
    match e {
        sifcn::net::NetError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Every differentiable primitive plus the composite blocks.
pub const GRAD_OPS: &[&str] = &[
    "conv2d",
    "maxpool2",
    "upsample",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "tanh",
    "scalar_affine",
    "concat_channels",
    "slice_channels",
    "sum",
    "dice_loss",
    "rotation_loss",
    "iou_loss",
    "box_upsample",
    "nested_sum",
    "uf_block",
    "cwf_block",
    "output_head",
];

/// Worst relative error over `CASES_PER_OP` seeded cases of `op`.
pub fn op_worst_error(op: &str) -> f64 {
    let seed = op.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    cases(op, seed, CASES_PER_OP).iter().map(max_relative_error).fold(0.0, f64::max)
}

/// Prints one criterion verdict line.
pub fn verdict(criterion: u32, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn load_config(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(&configs_dir().join(name), &overrides).expect("shipped config is valid")
}
