//! The detector network: a VGG-style backbone with four pooled outputs,
//! three iterative fusion blocks from coarse to fine, and per-scale heads
//! that emit score, rotation and distance maps.

pub mod blocks;
pub mod params;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub use blocks::{cwf_block, output_head, uf_block, BlockVars, MapVars};
pub use params::{BoundParams, ConvVars, Init, ParamSet, ParamSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("network configuration: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Unweighted fusion.
    Uf,
    /// Complementary weighted fusion.
    Cwf,
}

/// Supervision scales, coarse to fine: 1..=3 follow the three fusion blocks
/// (strides 16, 8, 4); 4 is the final output at input resolution.
pub const ALL_SCALES: [u8; 4] = [1, 2, 3, 4];
pub const FINAL_SCALE: u8 = 4;

/// Backbone feature strides for `f1..f4`.
pub const FEATURE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Channel widths of the features at strides 4, 8, 16 and 32.
    pub backbone_channels: [usize; 4],
    /// Output widths of the three fusion blocks (coarse to fine). Defaults to
    /// the backbone widths at strides 16, 8 and 4.
    #[serde(default)]
    pub fusion_channels: Option<[usize; 3]>,
    pub fusion_kind: FusionKind,
    pub head_scales: Vec<u8>,
    /// Upper bound of the distance head, in input pixels.
    pub dmax: f64,
    pub input_size: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            backbone_channels: [8, 16, 32, 64],
            fusion_channels: None,
            fusion_kind: FusionKind::Cwf,
            head_scales: ALL_SCALES.to_vec(),
            dmax: 64.0,
            input_size: 64,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.head_scales.is_empty() || !self.head_scales.contains(&FINAL_SCALE) {
            return Err(NetError::Config("head_scales must contain scale 4".into()));
        }
        if let Some(s) = self.head_scales.iter().find(|s| !ALL_SCALES.contains(s)) {
            return Err(NetError::Config(format!("head_scales: unknown scale {s}")));
        }
        if !(self.dmax > 0.0 && self.dmax.is_finite()) {
            return Err(NetError::Config(format!("dmax must be positive, got {}", self.dmax)));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(NetError::Config(format!("input_size {} is not a positive multiple of 32", self.input_size)));
        }
        if self.backbone_channels.contains(&0) || self.fusion_widths().contains(&0) {
            return Err(NetError::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    pub fn fusion_widths(&self) -> [usize; 3] {
        let c = self.backbone_channels;
        self.fusion_channels.unwrap_or([c[2], c[1], c[0]])
    }

    /// Stride of the maps emitted for `scale`.
    pub fn scale_stride(scale: u8) -> usize {
        match scale {
            1 => 16,
            2 => 8,
            3 => 4,
            _ => 1,
        }
    }

    pub fn has_head(&self, scale: u8) -> bool {
        self.head_scales.contains(&scale)
    }
}

/// Detection maps for a batch: score `Bx1xhxw` in (0,1), rotation `Bx1xhxw`
/// in (-pi/2, pi/2), distance `Bx4xhxw` in [0, dmax] with channels
/// (top, right, bottom, left).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMaps<T> {
    pub score: Tensor<T>,
    pub rotation: Tensor<T>,
    pub distance: Tensor<T>,
    pub stride: usize,
}

impl<T: Real> DetectionMaps<T> {
    pub fn from_graph(g: &Graph<T>, m: &MapVars) -> Self {
        DetectionMaps {
            score: g.value(m.score).clone(),
            rotation: g.value(m.rotation).clone(),
            distance: g.value(m.distance).clone(),
            stride: m.stride,
        }
    }

    /// Maps of batch element `b`.
    pub fn item(&self, b: usize) -> Result<Self, TensorError> {
        Ok(DetectionMaps {
            score: self.score.batch_item(b)?,
            rotation: self.rotation.batch_item(b)?,
            distance: self.distance.batch_item(b)?,
            stride: self.stride,
        })
    }

    pub fn batch(&self) -> usize {
        self.score.shape()[0]
    }
}

/// Backbone outputs `f1..f4` (strides 4..32).
pub type Features = [Var; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Sifcn {
    spec: NetworkSpec,
}

fn conv_spec(name: &str, out: usize, inp: usize, k: usize, init: Init) -> [ParamSpec; 2] {
    [
        ParamSpec { name: format!("{name}.weight"), shape: vec![out, inp, k, k], init },
        ParamSpec { name: format!("{name}.bias"), shape: vec![out], init: Init::Zeros },
    ]
}

impl Sifcn {
    pub fn new(spec: NetworkSpec) -> Result<Self, NetError> {
        spec.validate()?;
        Ok(Sifcn { spec })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Parameter layout. Stage 0 is a full-resolution stem pooled to stride 2;
    /// stages 1..=4 produce `f1..f4`. Each stage is two 3x3 conv + relu.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.spec.backbone_channels;
        let fw = self.spec.fusion_widths();
        let mut v = Vec::new();
        let widths = [c[0], c[0], c[1], c[2], c[3]];
        let mut inp = 3;
        for (stage, &w) in widths.iter().enumerate() {
            v.extend(conv_spec(&format!("backbone.stage{stage}.conv0"), w, inp, 3, Init::He));
            v.extend(conv_spec(&format!("backbone.stage{stage}.conv1"), w, w, 3, Init::He));
            inp = w;
        }
        v.extend(conv_spec("fusion.reduce", fw[0], c[3], 1, Init::He));
        let mut prev = fw[0];
        for (k, &out) in fw.iter().enumerate() {
            let fine = c[2 - k];
            if self.spec.fusion_kind == FusionKind::Cwf {
                v.extend(conv_spec(&format!("fusion.block{k}.weighting"), fine, prev, 1, Init::He));
            }
            v.extend(conv_spec(&format!("fusion.block{k}.reduce"), out, prev + fine, 1, Init::He));
            v.extend(conv_spec(&format!("fusion.block{k}.merge"), out, out, 3, Init::He));
            prev = out;
        }
        v.extend(conv_spec("fusion.final", fw[2], fw[2], 3, Init::He));
        for &s in ALL_SCALES.iter().filter(|s| self.spec.has_head(**s)) {
            let feat = if s == FINAL_SCALE { fw[2] } else { fw[s as usize - 1] };
            v.extend(conv_spec(&format!("head{s}"), 6, feat, 1, Init::LeCun));
        }
        v
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        ParamSet::initialize(&self.param_specs(), seed)
    }

    fn check_image<T: Real>(&self, g: &Graph<T>, image: Var) -> Result<(), NetError> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 || h != w || h % 32 != 0 || h == 0 {
            return Err(NetError::Config(format!("image must be Bx3xSxS with S divisible by 32, got {:?}", g.value(image).shape())));
        }
        Ok(())
    }

    /// Backbone features `f1..f4` at strides 4, 8, 16, 32.
    pub fn backbone_forward<T: Real>(&self, g: &mut Graph<T>, image: Var, p: &BoundParams) -> Result<Features, NetError> {
        self.check_image(g, image)?;
        let mut x = image;
        let mut feats = Vec::with_capacity(4);
        for stage in 0..5 {
            x = blocks::conv_relu(g, x, p.conv(&format!("backbone.stage{stage}.conv0"))?, 1)?;
            x = blocks::conv_relu(g, x, p.conv(&format!("backbone.stage{stage}.conv1"))?, 1)?;
            x = g.maxpool2(x)?;
            if stage > 0 {
                feats.push(x);
            }
        }
        Ok([feats[0], feats[1], feats[2], feats[3]])
    }

    fn block_vars(&self, p: &BoundParams, k: usize) -> Result<BlockVars, NetError> {
        let weighting = match self.spec.fusion_kind {
            FusionKind::Cwf => Some(p.conv(&format!("fusion.block{k}.weighting"))?),
            FusionKind::Uf => None,
        };
        Ok(BlockVars {
            weighting,
            reduce: p.conv(&format!("fusion.block{k}.reduce"))?,
            merge: p.conv(&format!("fusion.block{k}.merge"))?,
        })
    }

    /// Full forward pass. Returns one set of maps per configured head scale;
    /// the final scale is brought to input resolution.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var, p: &BoundParams) -> Result<BTreeMap<u8, MapVars>, NetError> {
        let f = self.backbone_forward(g, image, p)?;
        let mut h = blocks::conv_relu(g, f[3], p.conv("fusion.reduce")?, 0)?;
        let mut out = BTreeMap::new();
        for k in 0..3 {
            let bv = self.block_vars(p, k)?;
            h = match self.spec.fusion_kind {
                FusionKind::Uf => uf_block(g, h, f[2 - k], &bv)?,
                FusionKind::Cwf => cwf_block(g, h, f[2 - k], &bv)?,
            };
            let scale = k as u8 + 1;
            if self.spec.has_head(scale) {
                let maps = output_head(g, h, self.spec.dmax, p.conv(&format!("head{scale}"))?, NetworkSpec::scale_stride(scale))?;
                out.insert(scale, maps);
            }
        }
        let top = blocks::conv_relu(g, h, p.conv("fusion.final")?, 1)?;
        let coarse = output_head(g, top, self.spec.dmax, p.conv(&format!("head{FINAL_SCALE}"))?, FEATURE_STRIDES[0])?;
        let full = blocks::upsample_maps(g, coarse, FEATURE_STRIDES[0], self.spec.dmax)?;
        out.insert(FINAL_SCALE, full);
        Ok(out)
    }

    /// Inference without gradient tracking.
    pub fn predict<T: Real>(&self, params: &ParamSet<T>, images: &Tensor<T>) -> Result<BTreeMap<u8, DetectionMaps<T>>, NetError> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let maps = self.forward(&mut g, x, &bound)?;
        Ok(maps.iter().map(|(s, m)| (*s, DetectionMaps::from_graph(&g, m))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn tiny(kind: FusionKind) -> NetworkSpec {
        NetworkSpec {
            backbone_channels: [4, 4, 6, 8],
            fusion_channels: Some([6, 4, 4]),
            fusion_kind: kind,
            head_scales: vec![1, 2, 3, 4],
            dmax: 32.0,
            input_size: 32,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::default().validate().is_ok());
        assert!(NetworkSpec { head_scales: vec![1, 2], ..NetworkSpec::default() }.validate().is_err());
        assert!(NetworkSpec { input_size: 48, ..NetworkSpec::default() }.validate().is_err());
        assert!(NetworkSpec { dmax: 0.0, ..NetworkSpec::default() }.validate().is_err());
    }

    #[test]
    fn backbone_shapes() {
        let net = Sifcn::new(NetworkSpec::default()).unwrap();
        let params = net.init_params::<f64>(1);
        let mut g = Graph::new();
        let bp = params.bind(&mut g, false);
        let x = g.constant(random(&[1, 3, 64, 64], 2));
        let f = net.backbone_forward(&mut g, x, &bp).unwrap();
        let shapes: Vec<_> = f.iter().map(|v| g.value(*v).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 8, 16, 16], vec![1, 16, 8, 8], vec![1, 32, 4, 4], vec![1, 64, 2, 2]]);
    }

    #[test]
    fn backbone_rejects_bad_image() {
        let net = Sifcn::new(NetworkSpec::default()).unwrap();
        let params = net.init_params::<f64>(1);
        let mut g = Graph::new();
        let bp = params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 48, 48]));
        assert!(matches!(net.backbone_forward(&mut g, x, &bp), Err(NetError::Config(_))));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let net = Sifcn::new(NetworkSpec::default()).unwrap();
        let params = net.init_params::<f64>(3);
        let mut g = Graph::new();
        let bp = params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[2, 3, 64, 64]));
        for f in net.backbone_forward(&mut g, x, &bp).unwrap() {
            assert!(g.value(f).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn forward_scales_and_strides() {
        let net = Sifcn::new(NetworkSpec::default()).unwrap();
        let params = net.init_params::<f64>(4);
        let maps = net.predict(&params, &random(&[1, 3, 64, 64], 5)).unwrap();
        let got: Vec<_> = maps.iter().map(|(s, m)| (*s, m.stride, m.score.shape()[2], m.distance.shape()[1])).collect();
        assert_eq!(got, vec![(1, 16, 4, 4), (2, 8, 8, 4), (3, 4, 16, 4), (4, 1, 64, 4)]);
        let again = net.predict(&params, &random(&[1, 3, 64, 64], 5)).unwrap();
        assert_eq!(maps, again);
    }

    #[test]
    fn cwf_with_zero_weighting_equals_uf() {
        for seed in 0..5 {
            let mut g = Graph::<f64>::new();
            let u = g.constant(random(&[2, 5, 4, 4], seed));
            let f = g.constant(random(&[2, 3, 8, 8], seed + 100));
            let conv = |g: &mut Graph<f64>, o: usize, i: usize, k: usize, s: u64| ConvVars {
                weight: g.constant(random(&[o, i, k, k], s)),
                bias: g.constant(random(&[o], s + 1)),
            };
            let reduce = conv(&mut g, 4, 8, 1, seed + 7);
            let merge = conv(&mut g, 4, 4, 3, seed + 9);
            let weighting = ConvVars { weight: g.constant(Tensor::zeros(&[3, 5, 1, 1])), bias: g.constant(Tensor::zeros(&[3])) };
            let uf = uf_block(&mut g, u, f, &BlockVars { weighting: None, reduce, merge }).unwrap();
            let cwf = cwf_block(&mut g, u, f, &BlockVars { weighting: Some(weighting), reduce, merge }).unwrap();
            assert_eq!(g.value(uf).shape(), &[2, 4, 8, 8]);
            assert_eq!(g.value(uf), g.value(cwf));
        }
    }

    #[test]
    fn cwf_annihilates_when_weighting_is_one() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(random(&[1, 2, 2, 2], 1));
        let f = g.constant(random(&[1, 3, 4, 4], 2));
        let zero_f = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let reduce = ConvVars { weight: g.constant(random(&[2, 5, 1, 1], 3)), bias: g.constant(random(&[2], 4)) };
        let merge = ConvVars { weight: g.constant(random(&[2, 2, 3, 3], 5)), bias: g.constant(random(&[2], 6)) };
        // zero weights, unit bias: conv1x1(u) == 1 everywhere
        let ones = ConvVars { weight: g.constant(Tensor::zeros(&[3, 2, 1, 1])), bias: g.constant(Tensor::full(&[3], 1.0)) };
        let cwf = cwf_block(&mut g, u, f, &BlockVars { weighting: Some(ones), reduce, merge }).unwrap();
        let uf_zero = uf_block(&mut g, u, zero_f, &BlockVars { weighting: None, reduce, merge }).unwrap();
        assert_eq!(g.value(cwf), g.value(uf_zero));
    }

    #[test]
    fn fusion_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let f = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let c = ConvVars { weight: g.constant(Tensor::zeros(&[2, 4, 1, 1])), bias: g.constant(Tensor::zeros(&[2])) };
        let m = ConvVars { weight: g.constant(Tensor::zeros(&[2, 2, 3, 3])), bias: g.constant(Tensor::zeros(&[2])) };
        assert!(matches!(uf_block(&mut g, u, f, &BlockVars { weighting: None, reduce: c, merge: m }), Err(NetError::Config(_))));
    }

    #[test]
    fn head_at_zero_preactivation() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[1, 3, 2, 2], 1));
        let head = ConvVars { weight: g.constant(Tensor::zeros(&[6, 3, 1, 1])), bias: g.constant(Tensor::zeros(&[6])) };
        let m = output_head(&mut g, x, 40.0, head, 4).unwrap();
        assert!(g.value(m.score).data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(g.value(m.rotation).data().iter().all(|v| *v == 0.0));
        assert!(g.value(m.distance).data().iter().all(|v| *v == 20.0));
    }

    #[test]
    fn head_ranges_hold_for_extreme_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 4], vec![-1e6, -50.0, 50.0, 1e6]).unwrap());
        let head = ConvVars { weight: g.constant(Tensor::full(&[6, 1, 1, 1], 1.0)), bias: g.constant(Tensor::zeros(&[6])) };
        let m = output_head(&mut g, x, 10.0, head, 1).unwrap();
        assert!(g.value(m.score).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let half_pi = std::f64::consts::FRAC_PI_2;
        assert!(g.value(m.rotation).data().iter().all(|v| *v > -half_pi && *v < half_pi));
        assert!(g.value(m.distance).data().iter().all(|v| (0.0..=10.0).contains(v)));
    }

    #[test]
    fn tiny_spec_runs_both_fusions() {
        for kind in [FusionKind::Uf, FusionKind::Cwf] {
            let net = Sifcn::new(tiny(kind)).unwrap();
            let p = net.init_params::<f64>(9);
            p.check(&net.param_specs()).unwrap();
            let maps = net.predict(&p, &random(&[2, 3, 32, 32], 1)).unwrap();
            assert_eq!(maps[&4].score.shape(), &[2, 1, 32, 32]);
            assert_eq!(maps[&1].score.shape(), &[2, 1, 2, 2]);
        }
    }
}
