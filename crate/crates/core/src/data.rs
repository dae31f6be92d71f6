//! Labelled image sets: the `LDDS` file format and a seeded synthetic
//! generator of class-conditional Gaussian-blob images.
//!
//! File layout, little-endian: `"LDDS" | u32 version | u32 n, c, h, w |
//! u32 classes | f32 data (n·c·h·w) | u32 labels (n)`.

use crate::error::{format_err, invalid, Result};
use crate::net::Tensor4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"LDDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if labels.len() != images.n {
            return Err(invalid(format!(
                "{} labels for {} images",
                labels.len(),
                images.n
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(invalid(format!("label {} at index {i} >= {classes} classes", labels[i])));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.images;
        let mut out = Vec::with_capacity(HEADER_LEN + t.data().len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, t.n as u32, t.c as u32, t.h as u32, t.w as u32, self.classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err(bytes.len() as u64, "truncated header"));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(format_err(0, "bad magic, expected \"LDDS\""));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != DATASET_VERSION {
            return Err(format_err(4, format!("unsupported version {}", word(0))));
        }
        let (n, c, h, w, classes) = (
            word(1) as usize,
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5) as usize,
        );
        let count = n * c * h * w;
        let data_end = HEADER_LEN + count * 4;
        let total = data_end + n * 4;
        if bytes.len() < total {
            return Err(format_err(
                bytes.len() as u64,
                format!("truncated: header declares {total} bytes, file has {}", bytes.len()),
            ));
        }
        if bytes.len() > total {
            return Err(format_err(total as u64, "trailing bytes after label array"));
        }
        let data: Vec<f32> = bytes[HEADER_LEN..data_end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(format_err((HEADER_LEN + 4 * i) as u64, "non-finite pixel"));
        }
        let mut labels = Vec::with_capacity(n);
        for (i, b) in bytes[data_end..total].chunks_exact(4).enumerate() {
            let l = u32::from_le_bytes(b.try_into().unwrap());
            if l as usize >= classes {
                return Err(format_err(
                    (data_end + 4 * i) as u64,
                    format!("label {l} at index {i} is not below num-classes {classes}"),
                ));
            }
            labels.push(l);
        }
        let images = Tensor4::new(n, c, h, w, data)?;
        Ok(Self { images, labels, classes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Parameters of the synthetic blob task. `seed` fixes the class prototypes;
/// `stream` selects an independent sample stream, so train and test sets of
/// the same task share `seed` and differ in `stream`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub stream: u64,
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    /// Class-blob amplitude multiplier.
    pub separation: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Maximum blob-centre displacement in pixels.
    pub jitter: f32,
    /// Class blobs per prototype.
    pub blobs: usize,
    /// Class-independent blobs added to every image.
    pub distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stream: 0,
            samples: 1024,
            classes: 4,
            channels: 3,
            size: 16,
            separation: 1.0,
            noise: 0.6,
            jitter: 2.0,
            blobs: 3,
            distractors: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cy: f32,
    cx: f32,
    sigma: f32,
    color: Vec<f32>,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, channels: usize, size: usize) -> Self {
        let lo = 2.0;
        let hi = (size as f32 - 2.0).max(lo + 1e-3);
        Blob {
            cy: rng.random_range(lo..hi),
            cx: rng.random_range(lo..hi),
            sigma: rng.random_range(1.0..2.5),
            color: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn paint(&self, img: &mut [f32], channels: usize, size: usize, dy: f32, dx: f32, amp: f32) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        for y in 0..size {
            for x in 0..size {
                let ry = y as f32 - (self.cy + dy);
                let rx = x as f32 - (self.cx + dx);
                let g = amp * (-(ry * ry + rx * rx) * inv).exp();
                for c in 0..channels {
                    img[(c * size + y) * size + x] += g * self.color[c];
                }
            }
        }
    }
}

/// Seeded, exactly class-balanced (up to the remainder) blob images.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    if cfg.size < 4 || cfg.channels == 0 || cfg.samples == 0 {
        return Err(invalid("image size must be >= 4 with at least one channel and sample"));
    }
    if !(cfg.noise >= 0.0 && cfg.jitter >= 0.0 && cfg.separation > 0.0) {
        return Err(invalid("noise, jitter and separation must be non-negative"));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<Blob>> = (0..cfg.classes)
        .map(|_| (0..cfg.blobs).map(|_| Blob::random(&mut proto_rng, cfg.channels, cfg.size)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream + 1);
    let mut labels: Vec<u32> = (0..cfg.samples).map(|i| (i % cfg.classes) as u32).collect();
    labels.shuffle(&mut rng);

    let noise = Normal::new(0.0f32, cfg.noise).map_err(|e| invalid(e.to_string()))?;
    let per = cfg.channels * cfg.size * cfg.size;
    let mut data = vec![0.0f32; cfg.samples * per];
    for (s, &label) in labels.iter().enumerate() {
        let img = &mut data[s * per..(s + 1) * per];
        for blob in &prototypes[label as usize] {
            let dy = rng.random_range(-1.0..=1.0) * cfg.jitter;
            let dx = rng.random_range(-1.0..=1.0) * cfg.jitter;
            let amp = cfg.separation * rng.random_range(0.6..1.4);
            blob.paint(img, cfg.channels, cfg.size, dy, dx, amp);
        }
        for _ in 0..cfg.distractors {
            let blob = Blob::random(&mut rng, cfg.channels, cfg.size);
            let amp = rng.random_range(0.6..1.4);
            blob.paint(img, cfg.channels, cfg.size, 0.0, 0.0, amp);
        }
        if cfg.noise > 0.0 {
            for v in img.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let images = Tensor4::new(cfg.samples, cfg.channels, cfg.size, cfg.size, data)?;
    Dataset::new(images, labels, cfg.classes)
}
