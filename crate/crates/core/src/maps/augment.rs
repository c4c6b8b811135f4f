//! Mirror, translate-crop and HSV jitter applied consistently to images and
//! annotations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::RotatedRect;
use crate::tensor::Tensor;

use super::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentOptions {
    pub mirror: bool,
    pub crop: bool,
    pub color_jitter: bool,
    /// Largest crop offset as a fraction of the image side.
    pub max_shift: f64,
    /// Hue shift bound, as a fraction of a full turn.
    pub hue: f64,
    /// Relative saturation and brightness scale bounds.
    pub saturation: f64,
    pub brightness: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions { mirror: true, crop: true, color_jitter: true, max_shift: 0.125, hue: 0.05, saturation: 0.2, brightness: 0.15 }
    }
}

impl AugmentOptions {
    pub fn none() -> Self {
        AugmentOptions { mirror: false, crop: false, color_jitter: false, ..Self::default() }
    }
}

const CROP_TRIES: usize = 10;

/// Horizontal flip of image and annotations.
pub fn mirror(sample: &Sample) -> Sample {
    let (c, h, w) = (sample.image.shape()[0], sample.image.shape()[1], sample.image.shape()[2]);
    let src = sample.image.data();
    let image = Tensor::from_fn(&[c, h, w], |k| {
        let (row, x) = (k / w, k % w);
        src[row * w + (w - 1 - x)]
    });
    Sample { id: sample.id.clone(), image, annotations: sample.annotations.iter().map(|r| r.mirror_x(w as f64)).collect() }
}

fn fully_inside(r: &RotatedRect, size: f64) -> bool {
    let (x0, y0, x1, y1) = r.bounds();
    x0 >= 0.0 && y0 >= 0.0 && x1 <= size && y1 <= size
}

/// Same-size crop whose window starts at `(dx, dy)` in the source image.
/// Uncovered pixels are zero; annotations are shifted by `(-dx, -dy)` and
/// dropped unless they remain fully inside.
pub fn translate_crop(sample: &Sample, dx: i64, dy: i64) -> Sample {
    let (c, h, w) = (sample.image.shape()[0], sample.image.shape()[1], sample.image.shape()[2]);
    let src = sample.image.data();
    let image = Tensor::from_fn(&[c, h, w], |k| {
        let (ch, y, x) = (k / (h * w), (k / w) % h, k % w);
        let (sy, sx) = (y as i64 + dy, x as i64 + dx);
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            0.0
        } else {
            src[(ch * h + sy as usize) * w + sx as usize]
        }
    });
    let annotations = sample
        .annotations
        .iter()
        .map(|r| r.translate(-dx as f64, -dy as f64))
        .filter(|r| fully_inside(r, w as f64))
        .collect();
    Sample { id: sample.id.clone(), image, annotations }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Shifts hue by `hue_shift` turns and scales saturation and value; results
/// are clamped to `[0, 1]`.
pub fn color_jitter(image: &Tensor<f64>, hue_shift: f64, sat_scale: f64, val_scale: f64) -> Tensor<f64> {
    let plane = image.shape()[1] * image.shape()[2];
    let src = image.data();
    let mut out = src.to_vec();
    for k in 0..plane {
        let [h, s, v] = rgb_to_hsv([src[k], src[plane + k], src[2 * plane + k]]);
        let rgb = hsv_to_rgb([h + hue_shift, (s * sat_scale).clamp(0.0, 1.0), (v * val_scale).clamp(0.0, 1.0)]);
        for (c, value) in rgb.into_iter().enumerate() {
            out[c * plane + k] = value.clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Random mirror, crop and colour jitter. A crop is accepted only if it keeps
/// at least one annotation whole (when the sample has any); after bounded
/// retries the crop is skipped.
pub fn augment(sample: &Sample, rng: &mut impl Rng, opts: &AugmentOptions) -> Sample {
    let mut out = sample.clone();
    if opts.mirror && rng.gen_bool(0.5) {
        out = mirror(&out);
    }
    if opts.crop {
        let limit = (opts.max_shift * out.size() as f64).floor() as i64;
        for _ in 0..CROP_TRIES {
            let (dx, dy) = (rng.gen_range(-limit..=limit), rng.gen_range(-limit..=limit));
            let cropped = translate_crop(&out, dx, dy);
            if out.annotations.is_empty() || !cropped.annotations.is_empty() {
                out = cropped;
                break;
            }
        }
    }
    if opts.color_jitter {
        let hue = rng.gen_range(-opts.hue..=opts.hue);
        let sat = 1.0 + rng.gen_range(-opts.saturation..=opts.saturation);
        let val = 1.0 + rng.gen_range(-opts.brightness..=opts.brightness);
        out.image = color_jitter(&out.image, hue, sat, val);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{encode_ground_truth, synth_scene, SynthSpec};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64) -> Sample {
        synth_scene(seed, &SynthSpec::default(), "s").unwrap()
    }

    #[test]
    fn mirror_is_an_involution() {
        for seed in 0..10 {
            let s = scene(seed);
            let back = mirror(&mirror(&s));
            assert_eq!(back.image, s.image);
            for (a, b) in back.annotations.iter().zip(&s.annotations) {
                assert_eq!(a.theta, b.theta);
                for (p, q) in a.vertices.iter().zip(&b.vertices) {
                    assert!((p.x - q.x).abs() < 1e-12 && p.y == q.y);
                }
            }
        }
    }

    #[test]
    fn mirror_negates_theta_and_matches_pixels() {
        let s = scene(3);
        let m = mirror(&s);
        for (a, b) in m.annotations.iter().zip(&s.annotations) {
            assert_eq!(a.theta, -b.theta);
            a.validate(1e-9).unwrap();
        }
        let gt = encode_ground_truth(&s.annotations, 64, 1, 0.0).unwrap();
        let gm = encode_ground_truth(&m.annotations, 64, 1, 0.0).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(gt.score.data()[y * 64 + x], gm.score.data()[y * 64 + 63 - x]);
            }
        }
    }

    #[test]
    fn crop_reencodes_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let s = scene(seed);
            let a = augment(&s, &mut rng, &AugmentOptions { color_jitter: false, mirror: false, ..AugmentOptions::default() });
            for r in &a.annotations {
                let (x0, y0, x1, y1) = r.bounds();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 64.0 && y1 <= 64.0);
            }
            assert!(!a.annotations.is_empty());
            assert!(a.annotations.len() <= s.annotations.len());
        }
    }

    #[test]
    fn cropped_targets_are_shifted_targets_of_surviving_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..20 {
            let s = scene(seed);
            let (dx, dy) = (rng.gen_range(-8i64..=8), rng.gen_range(-8i64..=8));
            let c = translate_crop(&s, dx, dy);
            let survivors: Vec<_> = s.annotations.iter().filter(|r| fully_inside(&r.translate(-dx as f64, -dy as f64), 64.0)).copied().collect();
            let orig = encode_ground_truth(&survivors, 64, 1, 0.3).unwrap();
            let crop = encode_ground_truth(&c.annotations, 64, 1, 0.3).unwrap();
            for y in 0..64i64 {
                for x in 0..64i64 {
                    let (sy, sx) = (y + dy, x + dx);
                    let k = (y * 64 + x) as usize;
                    if !(0..64).contains(&sy) || !(0..64).contains(&sx) {
                        assert_eq!(crop.score.data()[k], 0.0);
                        continue;
                    }
                    let ks = (sy * 64 + sx) as usize;
                    assert_eq!(crop.score.data()[k], orig.score.data()[ks]);
                    assert_eq!(crop.rotation.data()[k], orig.rotation.data()[ks]);
                    for ch in 0..4 {
                        assert!((crop.distance.data()[ch * 4096 + k] - orig.distance.data()[ch * 4096 + ks]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn translate_crop_moves_pixels_and_boxes() {
        let s = scene(5);
        let c = translate_crop(&s, 3, -2);
        let (w, plane) = (64, 64 * 64);
        assert_eq!(c.image.data()[10 * w + 10], s.image.data()[8 * w + 13]);
        assert_eq!(c.image.data()[0], 0.0);
        assert_eq!(c.image.data()[plane + 5 * w + 63], 0.0);
        let translated: Vec<_> = s.annotations.iter().map(|r| r.translate(-3.0, 2.0)).filter(|r| fully_inside(r, 64.0)).collect();
        assert_eq!(c.annotations, translated);
        assert_eq!(translate_crop(&s, 0, 0), s);
    }

    #[test]
    fn jitter_changes_only_pixels() {
        let s = scene(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = augment(&s, &mut rng, &AugmentOptions { mirror: false, crop: false, ..AugmentOptions::default() });
        assert_eq!(j.annotations, s.annotations);
        assert_ne!(j.image, s.image);
        assert!(j.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let id = color_jitter(&s.image, 0.0, 1.0, 1.0);
        for (a, b) in id.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1], [0.1, 0.9, 0.4]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for (a, b) in back.iter().zip(rgb) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
