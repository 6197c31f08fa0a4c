//! Dataset ingestion: a seeded synthetic blob task or an IDX image/label pair.

use std::path::{Path, PathBuf};

use oqat_core::data::{DataSplits, Split};
use oqat_core::numerics::Tensor;
use oqat_core::{OqatError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Idx(IdxSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub image_size: usize,
    pub samples: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel noise.
    pub noise: f32,
    /// Standard deviation of blob-center jitter, in pixels.
    pub jitter: f32,
    pub val_frac: f64,
    pub calib_frac: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 10, image_size: 24, samples: 2000, seed: 0, noise: 0.35, jitter: 1.5, val_frac: 0.2, calib_frac: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    #[serde(default = "default_calib_frac")]
    pub calib_frac: f64,
    #[serde(default)]
    pub seed: u64,
    /// Use only the first `limit` samples.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_val_frac() -> f64 {
    0.2
}

fn default_calib_frac() -> f64 {
    0.1
}

/// Per-class blob layout: centre (row, col), radius and a second, fainter
/// blob so that classes differ in more than position.
struct ClassTemplate {
    center: (f32, f32),
    sigma: f32,
    satellite: (f32, f32),
}

fn templates(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<ClassTemplate> {
    let size = spec.image_size as f32;
    let margin = size * 0.2;
    (0..spec.classes)
        .map(|_| {
            let pos = |rng: &mut ChaCha8Rng| (rng.random_range(margin..size - margin), rng.random_range(margin..size - margin));
            ClassTemplate { center: pos(rng), sigma: rng.random_range(1.5..size * 0.15), satellite: pos(rng) }
        })
        .collect()
}

fn render(size: usize, blobs: &[((f32, f32), f32, f32)], out: &mut [f32]) {
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &((cy, cx), sigma, amp) in blobs {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            out[y * size + x] += v;
        }
    }
}

/// Class-conditional Gaussian-blob images, one channel.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Tensor<f32>, Vec<usize>)> {
    if spec.classes < 2 || spec.image_size < 4 || spec.samples < spec.classes {
        return Err(OqatError::Config(format!(
            "synthetic dataset needs >= 2 classes, image_size >= 4 and at least one sample per class (got {} classes, size {}, {} samples)",
            spec.classes, spec.image_size, spec.samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = templates(spec, &mut rng);
    let n = spec.samples;
    let s = spec.image_size;
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| OqatError::Config(e.to_string()))?;
    let jitter = Normal::new(0.0f32, spec.jitter.max(0.0)).map_err(|e| OqatError::Config(e.to_string()))?;
    let mut data = vec![0.0f32; n * s * s];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in data.chunks_mut(s * s).enumerate() {
        let c = i % spec.classes;
        let t = &classes[c];
        let j = |rng: &mut ChaCha8Rng, p: (f32, f32)| (p.0 + jitter.sample(rng), p.1 + jitter.sample(rng));
        let amp = rng.random_range(0.7..1.3);
        let main = (j(&mut rng, t.center), t.sigma * rng.random_range(0.85..1.15), amp);
        let sat = (j(&mut rng, t.satellite), 1.5, 0.5 * amp);
        render(s, &[main, sat], img);
        img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        labels.push(c);
    }
    Ok((Tensor::new(vec![n, 1, s, s], data)?, labels))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| OqatError::Invalid(format!("{}: truncated header at byte offset {offset}", path.display())))
}

/// Parse an IDX file holding unsigned bytes: returns dims and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected_magic {
        return Err(OqatError::Invalid(format!(
            "{}: bad IDX magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}",
            path.display()
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(be_u32(bytes, 4 + 4 * d, path)? as usize);
    }
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != len {
        return Err(OqatError::Invalid(format!(
            "{}: dims {:?} need {len} payload bytes from byte offset {start}, file has {}",
            path.display(),
            dims,
            payload.len()
        )));
    }
    Ok((dims, payload.to_vec()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| OqatError::Config(format!("cannot read dataset file {}: {e}", path.display())))
}

pub fn load_idx(spec: &IdxSpec) -> Result<(Tensor<f32>, Vec<usize>)> {
    let ib = read(&spec.images)?;
    let lb = read(&spec.labels)?;
    let (idims, pixels) = parse_idx(&ib, 0x0000_0803, &spec.images)?;
    let (ldims, labels) = parse_idx(&lb, 0x0000_0801, &spec.labels)?;
    if idims[0] != ldims[0] {
        return Err(OqatError::Invalid(format!(
            "{} holds {} images but {} holds {} labels (count at byte offset 4)",
            spec.images.display(),
            idims[0],
            spec.labels.display(),
            ldims[0]
        )));
    }
    if idims[1] != idims[2] {
        return Err(OqatError::Invalid(format!(
            "{}: images must be square, header at byte offset 8 gives {}x{}",
            spec.images.display(),
            idims[1],
            idims[2]
        )));
    }
    let n = spec.limit.map_or(idims[0], |l| l.min(idims[0]));
    let px = idims[1] * idims[2];
    let data = pixels[..n * px].iter().map(|&b| b as f32 / 255.0).collect();
    let labels = labels[..n].iter().map(|&b| b as usize).collect();
    Ok((Tensor::new(vec![n, 1, idims[1], idims[2]], data)?, labels))
}

/// Shuffle once with `seed` and cut into calibration, validation and
/// training splits.
pub fn split(images: Tensor<f32>, labels: Vec<usize>, val_frac: f64, calib_frac: f64, seed: u64) -> Result<DataSplits> {
    if !(val_frac >= 0.0 && calib_frac >= 0.0 && val_frac + calib_frac < 1.0) {
        return Err(OqatError::Config(format!("split fractions val {val_frac} + calib {calib_frac} must be nonnegative and below 1")));
    }
    let n = labels.len();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let n_val = (n as f64 * val_frac).round() as usize;
    let n_calib = ((n as f64 * calib_frac).round() as usize).max(1);
    if n_val + n_calib >= n {
        return Err(OqatError::Config(format!("{n} samples leave no training data after the split")));
    }
    let mk = |idx: &[usize]| Split::new(images.gather_rows(idx), idx.iter().map(|&i| labels[i]).collect());
    Ok(DataSplits {
        calib: mk(&order[..n_calib])?,
        val: mk(&order[n_calib..n_calib + n_val])?,
        train: mk(&order[n_calib + n_val..])?,
        num_classes,
    })
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<DataSplits> {
    match spec {
        DatasetSpec::Synthetic(s) => {
            let (images, labels) = synthetic(s)?;
            let mut d = split(images, labels, s.val_frac, s.calib_frac, s.seed)?;
            d.num_classes = s.classes;
            Ok(d)
        }
        DatasetSpec::Idx(s) => {
            let (images, labels) = load_idx(s)?;
            split(images, labels, s.val_frac, s.calib_frac, s.seed)
        }
    }
}
