//! Neuron selection: masks, selection criteria, and keep-count validation
//! against the estimated ranks.

use crate::decompose::RankReport;
use crate::error::{invalid, Error, Result};
use crate::net::{Conv, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

/// Legal keep counts `(z, n]`. A layer whose rank equals its width can only
/// be kept whole.
pub fn valid_range(z: usize, n: usize) -> Result<RangeInclusive<usize>> {
    if z > n {
        return Err(Error::Invariant(format!("rank {z} exceeds width {n}")));
    }
    Ok(if z == n { n..=n } else { z + 1..=n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Topk,
    Random,
    Apoz,
    Activation,
    Weight,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Topk,
        Criterion::Random,
        Criterion::Apoz,
        Criterion::Activation,
        Criterion::Weight,
    ];

    pub fn needs_activations(self) -> bool {
        matches!(self, Criterion::Apoz | Criterion::Activation)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Topk => "topk",
            Criterion::Random => "random",
            Criterion::Apoz => "apoz",
            Criterion::Activation => "activation",
            Criterion::Weight => "weight",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown criterion '{s}' (expected topk, random, apoz, activation or weight)")))
    }
}

/// Score every output neuron of `conv`; higher scores are kept first.
/// `activations` are the layer's post-activation outputs on a sample batch.
pub fn score_neurons(
    criterion: Criterion,
    conv: &Conv,
    activations: Option<&Tensor4>,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = conv.c_out;
    let acts = || -> Result<&Tensor4> {
        let a = activations.ok_or_else(|| invalid(format!("criterion '{criterion}' needs captured activations")))?;
        if a.c != n {
            return Err(invalid(format!("activations have {} channels, layer has {n}", a.c)));
        }
        if a.n * a.h * a.w == 0 {
            return Err(invalid("empty activation batch"));
        }
        Ok(a)
    };
    Ok(match criterion {
        Criterion::Topk => (0..n).map(|i| (n - i) as f64).collect(),
        Criterion::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random::<f64>()).collect()
        }
        Criterion::Weight => {
            let mut l1 = vec![0.0; n];
            for row in conv.weight.chunks(n) {
                for (s, &w) in l1.iter_mut().zip(row) {
                    *s += (w as f64).abs();
                }
            }
            l1
        }
        Criterion::Activation => channel_reduce(acts()?, |v| v.abs()),
        Criterion::Apoz => channel_reduce(acts()?, |v| if v == 0.0 { 1.0 } else { 0.0 })
            .into_iter()
            .map(|f| -f)
            .collect(),
    })
}

/// Per-channel mean of `f` over samples and positions.
fn channel_reduce(t: &Tensor4, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let per = t.h * t.w;
    let count = (t.n * per) as f64;
    (0..t.c)
        .map(|c| {
            let mut s = 0.0;
            for b in 0..t.n {
                let base = (b * t.c + c) * per;
                s += t.data()[base..base + per].iter().map(|&v| f(v as f64)).sum::<f64>();
            }
            s / count
        })
        .collect()
}

/// Binary keep vector over one layer's output neurons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    keep: Vec<bool>,
}

impl Mask {
    pub fn full(n: usize) -> Self {
        Self { keep: vec![true; n] }
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(invalid("mask entries must be 0 or 1"));
        }
        Ok(Self {
            keep: bits.iter().map(|&b| b == 1).collect(),
        })
    }

    pub fn from_kept(n: usize, kept: &[usize]) -> Result<Self> {
        let mut keep = vec![false; n];
        for &i in kept {
            *keep.get_mut(i).ok_or_else(|| invalid(format!("channel {i} out of range for {n}")))? = true;
        }
        Ok(Self { keep })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    /// Indices of kept neurons in increasing order.
    pub fn kept(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn bits(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| k as u8).collect()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }
}

/// Keep the `k` highest scores; ties go to the lower index.
pub fn build_mask(scores: &[f64], k: usize) -> Result<Mask> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(invalid(format!("keep count {k} outside [1, {n}]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN neuron score"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Mask::from_kept(n, &order[..k])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKeep {
    pub name: String,
    pub keep: usize,
}

/// Reconstruction optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSettings {
    pub lr: f64,
    pub momentum: f64,
    /// Optimizer steps per layer; 0 means two epochs of the reconstruction set.
    pub iters: usize,
    pub batch: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            iters: 0,
            batch: 32,
        }
    }
}

impl OptimSettings {
    /// Step count for a reconstruction set of `samples` samples.
    pub fn steps(&self, samples: usize) -> usize {
        if self.iters > 0 {
            self.iters
        } else {
            (2 * samples).div_ceil(self.batch.max(1))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub energy: f64,
    pub layers: Vec<LayerKeep>,
    pub criterion: Criterion,
    #[serde(default)]
    pub optim: OptimSettings,
    #[serde(default)]
    pub seed: u64,
}

impl PruneConfig {
    /// Configured keep count for a layer, if any.
    pub fn keep(&self, name: &str) -> Option<usize> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.keep)
    }

    /// Keep `ratio` of every non-classifier layer in `report`, rounded to the
    /// nearest integer and at least one.
    pub fn uniform(report: &RankReport, ratio: f64, criterion: Criterion, seed: u64) -> Self {
        let last = report.layers.len().saturating_sub(1);
        let layers = report.layers[..last]
            .iter()
            .map(|l| LayerKeep {
                name: l.name.clone(),
                keep: ((l.n as f64 * ratio).round() as usize).clamp(1, l.n),
            })
            .collect();
        Self {
            energy: report.energy,
            layers,
            criterion,
            optim: OptimSettings::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: String,
    pub keep: usize,
    pub z: usize,
    pub n: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Check every configured keep count against the report. A layer kept whole
/// is always accepted; otherwise `z < k ≤ n` must hold. The last layer of the
/// report is the classifier and cannot be pruned.
pub fn validate_config(cfg: &PruneConfig, report: &RankReport) -> Vec<Violation> {
    let mut out = Vec::new();
    let last = report.layers.last().map(|l| l.name.as_str());
    for entry in &cfg.layers {
        let violation = |z: usize, n: usize, message: String| Violation {
            layer: entry.name.clone(),
            keep: entry.keep,
            z,
            n,
            message,
        };
        let Some(rank) = report.get(&entry.name) else {
            out.push(violation(0, 0, format!("layer '{}' is not in the rank report", entry.name)));
            continue;
        };
        let (z, n, k) = (rank.z, rank.n, entry.keep);
        if k == n {
            continue;
        }
        if Some(entry.name.as_str()) == last {
            out.push(violation(z, n, format!(
                "layer '{}' is the classifier; its {n} outputs cannot be pruned (keep {k})",
                entry.name
            )));
        } else if k <= z || k > n {
            out.push(violation(z, n, format!(
                "layer '{}': keep {k} outside the valid range (z_l, n_l] = ({z}, {n}]",
                entry.name
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for entry in &cfg.layers {
        if !seen.insert(entry.name.as_str()) {
            out.push(Violation {
                layer: entry.name.clone(),
                keep: entry.keep,
                z: 0,
                n: 0,
                message: format!("layer '{}' is configured more than once", entry.name),
            });
        }
    }
    out
}
