//! On-disk datasets: `manifest.json`, `images/<id>.png` (8-bit RGB) and
//! `annotations/<id>.json` (polygon JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::annotations::{parse_polygons_json, write_polygons_json};
use super::{MapsError, Sample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Generator seed for synthetic samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub image: String,
    pub annotations: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub image_size: usize,
    pub samples: Vec<ManifestEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> MapsError + '_ {
    move |source| MapsError::Io { path: path.to_path_buf(), source }
}

fn image_err(path: &Path, message: impl ToString) -> MapsError {
    MapsError::Image { path: path.to_path_buf(), message: message.to_string() }
}

/// Writes a `3xSxS` image with values in `[0, 1]` as 8-bit RGB PNG.
pub fn save_png(path: &Path, image: &Tensor<f64>) -> Result<(), MapsError> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(image_err(path, format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let plane = h * w;
    let buf: Vec<u8> = (0..plane).flat_map(|k| (0..3).map(move |ch| (d[ch * plane + k].clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|e| image_err(path, e))
}

/// Reads a PNG as a `3xHxW` tensor with values `v / 255`.
pub fn load_png(path: &Path) -> Result<Tensor<f64>, MapsError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let plane = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |k| {
        let (ch, p) = (k / plane, k % plane);
        raw[p * 3 + ch] as f64 / 255.0
    }))
}

fn check_id(id: &str) -> Result<(), MapsError> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
        return Err(MapsError::Config(format!("sample id {id:?} must be non-empty [A-Za-z0-9._-] not starting with '.'")));
    }
    Ok(())
}

/// Writes samples (with optional generator seeds) and their manifest.
pub fn write_dataset(dir: &Path, samples: &[(Sample, Option<u64>)], image_size: usize) -> Result<Manifest, MapsError> {
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io(&p))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (s, seed) in samples {
        check_id(&s.id)?;
        if s.image.shape() != [3, image_size, image_size] {
            return Err(MapsError::Config(format!("sample {} has shape {:?}, expected 3x{image_size}x{image_size}", s.id, s.image.shape())));
        }
        let image = format!("images/{}.png", s.id);
        let annotations = format!("annotations/{}.json", s.id);
        save_png(&dir.join(&image), &s.image)?;
        let ap = dir.join(&annotations);
        fs::write(&ap, write_polygons_json(&s.annotations)).map_err(io(&ap))?;
        entries.push(ManifestEntry { id: s.id.clone(), seed: *seed, image, annotations });
    }
    let manifest = Manifest { schema_version: MANIFEST_VERSION, image_size, samples: entries };
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(io(&mp))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, MapsError> {
    let mp = dir.join(MANIFEST_FILE);
    let m: Manifest = serde_json::from_str(&fs::read_to_string(&mp).map_err(io(&mp))?)?;
    if m.schema_version != MANIFEST_VERSION {
        return Err(MapsError::Config(format!("{}: unsupported schema_version {}", mp.display(), m.schema_version)));
    }
    Ok(m)
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Loads every sample listed in the manifest. Images must be square with the
/// manifest's side length.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, MapsError> {
    let m = read_manifest(dir)?;
    m.samples
        .iter()
        .map(|e| {
            let ip = resolve(dir, &e.image);
            let image = load_png(&ip)?;
            if image.shape() != [3, m.image_size, m.image_size] {
                return Err(image_err(&ip, format!("size {:?} does not match manifest image_size {}", &image.shape()[1..], m.image_size)));
            }
            let ap = resolve(dir, &e.annotations);
            let text = fs::read_to_string(&ap).map_err(io(&ap))?;
            let annotations = parse_polygons_json(&text).map_err(|err| match err {
                MapsError::Parse { line, message } => MapsError::Parse { line, message: format!("{}: {message}", ap.display()) },
                other => other,
            })?;
            Ok(Sample { id: e.id.clone(), image, annotations })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{synth_scene, SynthSpec};

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let samples: Vec<_> = (0..3).map(|i| (synth_scene(i, &spec, format!("s{i}")).unwrap(), Some(i))).collect();
        let m = write_dataset(dir.path(), &samples, 64).unwrap();
        assert_eq!(m.samples.len(), 3);
        let back = load_dataset(dir.path()).unwrap();
        for ((s, _), b) in samples.iter().zip(&back) {
            assert_eq!(s, b);
        }
    }

    #[test]
    fn empty_dataset_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &[], 64).unwrap();
        assert!(m.samples.is_empty());
        assert!(load_dataset(dir.path()).unwrap().is_empty());
        let missing = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(missing.path()), Err(MapsError::Io { .. })));
        let bad = synth_scene(0, &SynthSpec::default(), "bad id").unwrap();
        assert!(write_dataset(dir.path(), &[(bad, None)], 64).is_err());
    }
}
