//! Seeded synthetic scenes: filled rotated rectangles on a textured background.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{polygon_intersection_area, Point, RotatedRect};
use crate::tensor::Tensor;

use super::{MapsError, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Side lengths are drawn independently from `[min_size, max_size]` pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Angles are drawn from `[-max_angle, max_angle]` radians.
    pub max_angle: f64,
    /// Amplitude of the uniform per-pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            min_boxes: 1,
            max_boxes: 3,
            min_size: 12.0,
            max_size: 30.0,
            max_angle: std::f64::consts::FRAC_PI_6,
            noise: 0.04,
        }
    }
}

/// Upper bound of background channel values; box fills start above
/// [`FILL_MIN`] so that, with noise below the gap, foreground is separable by
/// a single intensity threshold.
pub const BACKGROUND_MAX: f64 = 0.38;
pub const FILL_MIN: f64 = 0.55;

/// Pixels kept clear between placed boxes.
const GAP: f64 = 2.0;
const PLACEMENT_TRIES: usize = 200;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), MapsError> {
        let s = self.image_size as f64;
        if self.image_size == 0 {
            return Err(MapsError::Config("image_size must be positive".into()));
        }
        if self.min_boxes > self.max_boxes {
            return Err(MapsError::Config("min_boxes exceeds max_boxes".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size * std::f64::consts::SQRT_2 < s) {
            return Err(MapsError::Config(format!("size range [{}, {}] does not fit a {s} px image at every angle", self.min_size, self.max_size)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.max_angle) {
            return Err(MapsError::Config(format!("max_angle {} must lie in [0, pi/2)", self.max_angle)));
        }
        if !(0.0..(FILL_MIN - BACKGROUND_MAX) / 2.0).contains(&self.noise) {
            return Err(MapsError::Config(format!("noise {} must lie in [0, {})", self.noise, (FILL_MIN - BACKGROUND_MAX) / 2.0)));
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn place_boxes(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<RotatedRect> {
    let s = spec.image_size as f64;
    let n = rng.gen_range(spec.min_boxes..=spec.max_boxes);
    let mut boxes: Vec<RotatedRect> = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.gen_range(spec.min_size..=spec.max_size);
            let h = rng.gen_range(spec.min_size..=spec.max_size);
            let theta = rng.gen_range(-spec.max_angle..=spec.max_angle);
            let c = Point::new(rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            let r = RotatedRect::from_center(c, w, h, theta);
            let (x0, y0, x1, y1) = r.bounds();
            if x0 < 1.0 || y0 < 1.0 || x1 > s - 1.0 || y1 > s - 1.0 {
                continue;
            }
            let padded = RotatedRect::from_center(c, w + 2.0 * GAP, h + 2.0 * GAP, theta);
            if boxes.iter().all(|b| polygon_intersection_area(b, &padded) == 0.0) {
                boxes.push(r);
                break;
            }
        }
    }
    boxes
}

/// Renders a deterministic scene for `seed`. A pixel belongs to a box when its
/// centre lies inside it. Values are quantised to multiples of 1/255 so the
/// scene survives an 8-bit image round trip unchanged.
pub fn synth_scene(seed: u64, spec: &SynthSpec, id: impl Into<String>) -> Result<Sample, MapsError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let annotations = place_boxes(&mut rng, spec);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.12..0.30));
    let freq: [f64; 2] = std::array::from_fn(|_| rng.gen_range(0.1..0.6));
    let phase: [f64; 2] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let fills: Vec<[f64; 3]> = annotations.iter().map(|_| std::array::from_fn(|_| rng.gen_range(FILL_MIN + 0.05..0.95))).collect();
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            let owner = annotations.iter().position(|r| r.contains(p));
            let texture = 0.08 * (freq[0] * p.x + phase[0]).sin() * (freq[1] * p.y + phase[1]).sin();
            for c in 0..3 {
                let clean = match owner {
                    Some(i) => fills[i][c],
                    None => base[c] + texture,
                };
                let noisy = clean + rng.gen_range(-1.0..=1.0) * spec.noise;
                data[(c * size + y) * size + x] = quantize(noisy);
            }
        }
    }
    Ok(Sample { id: id.into(), image: Tensor::new(vec![3, size, size], data)?, annotations })
}

/// Pixels whose mean channel value exceeds the background/fill midpoint.
pub fn bright_pixels(image: &Tensor<f64>) -> Vec<bool> {
    let (s, d) = (image.shape()[1] * image.shape()[2], image.data());
    let cut = (BACKGROUND_MAX + FILL_MIN) / 2.0;
    (0..s).map(|k| (d[k] + d[s + k] + d[2 * s + k]) / 3.0 > cut).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::default();
        let a = synth_scene(11, &spec, "a").unwrap();
        let b = synth_scene(11, &spec, "a").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_scene(12, &spec, "a").unwrap());
    }

    #[test]
    fn zero_boxes_gives_no_annotations() {
        let spec = SynthSpec { min_boxes: 0, max_boxes: 0, ..SynthSpec::default() };
        let s = synth_scene(1, &spec, "z").unwrap();
        assert!(s.annotations.is_empty());
        let m = super::super::encode_ground_truth(&s.annotations, 64, 1, 0.3).unwrap();
        assert!(m.score.data().iter().all(|v| *v == 0.0));
        assert!(bright_pixels(&s.image).iter().all(|b| !b));
    }

    #[test]
    fn annotations_are_valid_inside_and_disjoint() {
        let spec = SynthSpec::default();
        for seed in 0..50 {
            let s = synth_scene(seed, &spec, "x").unwrap();
            assert!(!s.annotations.is_empty());
            for (i, r) in s.annotations.iter().enumerate() {
                r.validate(1e-9).unwrap();
                let (x0, y0, x1, y1) = r.bounds();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 64.0 && y1 <= 64.0);
                assert!(r.theta.abs() <= spec.max_angle);
                for q in &s.annotations[i + 1..] {
                    assert_eq!(polygon_intersection_area(r, q), 0.0);
                }
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v) && ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SynthSpec { min_boxes: 3, max_boxes: 1, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { max_size: 60.0, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { max_angle: 2.0, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { noise: 0.2, ..SynthSpec::default() }.validate().is_err());
    }
}
