//! Stage one: cross-channel SVD decomposition of every linear layer into a
//! k×k embedding factor `Q` and a 1×1 transformation factor `R`, with rank
//! selection by cumulative singular-value energy and scale normalization of
//! the embedding.

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::{svd, truncated_factorize, Matrix};
use crate::metrics;
use crate::net::train::{fit, TrainSettings};
use crate::net::{fold_batchnorm, forward, Conv, Form, Layer, LayerKind, Network};
use serde::{Deserialize, Serialize};

/// Variance floor applied before normalization.
pub const VAR_EPS: f64 = 1e-8;

/// Tolerance on the energy comparison so that `e = 1.0` is reached despite
/// rounding in the cumulative sum.
const ENERGY_TOL: f64 = 1e-12;

/// One linear layer factored as `W = Q·R`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedLayer {
    pub name: String,
    /// Kind of the layer before decomposition (`Conv2D` or `Dense`).
    pub source: LayerKind,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub c_in: usize,
    pub n: usize,
    pub relu: bool,
    pub z: usize,
    /// `(k·k·c_in) × z`
    pub q: Matrix,
    /// `z × n`
    pub r: Matrix,
    pub q_bias: Vec<f32>,
    pub r_bias: Vec<f32>,
    pub norm_mean: Vec<f32>,
    pub norm_var: Vec<f32>,
    pub singular_values: Vec<f64>,
}

impl DecomposedLayer {
    pub fn embed_conv(&self) -> Result<Conv> {
        Conv::new(
            LayerKind::EmbedConv,
            self.k,
            self.pad,
            self.stride,
            self.c_in,
            self.z,
            self.q.data().to_vec(),
            Some(self.q_bias.clone()),
            false,
        )
    }

    pub fn pointwise_conv(&self) -> Result<Conv> {
        Conv::new(
            LayerKind::PointwiseConv,
            1,
            0,
            1,
            self.z,
            self.n,
            self.r.data().to_vec(),
            Some(self.r_bias.clone()),
            self.relu,
        )
    }

    /// The two network layers `name/q` and `name/r`.
    pub fn layers(&self) -> Result<[Layer; 2]> {
        Ok([
            Layer::conv(format!("{}/q", self.name), self.embed_conv()?),
            Layer::conv(format!("{}/r", self.name), self.pointwise_conv()?),
        ])
    }
}

/// Per-layer entry of a [`RankReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub name: String,
    pub singular_values: Vec<f64>,
    pub cum_energy: Vec<f64>,
    pub z: usize,
    pub n: usize,
    /// Keep counts in `(z, n]`, stored as `[z, n]`.
    pub valid_range: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub version: u32,
    pub energy: f64,
    pub layers: Vec<LayerRank>,
}

impl RankReport {
    pub fn get(&self, name: &str) -> Option<&LayerRank> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Normalized cumulative sums of `s`.
pub fn cumulative_energy(s: &[f64]) -> Vec<f64> {
    let total: f64 = s.iter().sum();
    let mut acc = 0.0;
    s.iter()
        .map(|&v| {
            acc += v;
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Smallest `z` whose leading singular values hold a fraction `e` of the
/// total singular-value sum.
pub fn estimate_rank(s: &[f64], e: f64) -> Result<usize> {
    if !(e > 0.0 && e <= 1.0) {
        return Err(invalid(format!("energy {e} outside (0, 1]")));
    }
    if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid("singular values must be finite and non-negative"));
    }
    if s.windows(2).any(|w| w[0] < w[1]) {
        return Err(invalid("singular values must be non-increasing"));
    }
    if s.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateLayer("(unnamed)".into()));
    }
    let cum = cumulative_energy(s);
    Ok(cum.iter().position(|&c| c >= e - ENERGY_TOL).map_or(s.len(), |j| j + 1))
}

/// Factor one `Conv2D` or `Dense` layer at energy `e`. The original bias goes
/// to the transformation factor; normalization statistics start at `(0, 1)`.
pub fn decompose_layer(name: &str, conv: &Conv, e: f64) -> Result<DecomposedLayer> {
    if !matches!(conv.kind, LayerKind::Conv2D | LayerKind::Dense) {
        return Err(invalid(format!(
            "layer '{name}' is {:?}; only Conv2D and Dense can be decomposed",
            conv.kind
        )));
    }
    let w = conv.weight_matrix();
    let res = svd(&w)?;
    let z = match estimate_rank(&res.s, e) {
        Err(Error::DegenerateLayer(_)) => return Err(Error::DegenerateLayer(name.to_string())),
        other => other?,
    };
    let (q, r) = truncated_factorize(&res, z)?;
    Ok(DecomposedLayer {
        name: name.to_string(),
        source: conv.kind,
        k: conv.k,
        pad: conv.pad,
        stride: conv.stride,
        c_in: conv.c_in,
        n: conv.c_out,
        relu: conv.relu,
        z,
        q,
        r,
        q_bias: vec![0.0; z],
        r_bias: conv.bias_or_zero(),
        norm_mean: vec![0.0; z],
        norm_var: vec![1.0; z],
        singular_values: res.s,
    })
}

/// Rescale the embedding to zero mean and unit variance given its observed
/// per-channel moments, compensating in `R` so the layer output is unchanged.
pub fn fold_normalization(layer: &DecomposedLayer, mean: &[f64], var: &[f64]) -> Result<DecomposedLayer> {
    if mean.len() != layer.z || var.len() != layer.z {
        return Err(invalid(format!(
            "layer '{}': statistics have lengths {}/{}, rank is {}",
            layer.name,
            mean.len(),
            var.len(),
            layer.z
        )));
    }
    if mean.iter().chain(var).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite normalization statistics"));
    }
    let sd: Vec<f64> = var.iter().map(|&v| v.max(VAR_EPS).sqrt()).collect();
    let (rows, z, n) = (layer.q.rows(), layer.z, layer.n);
    let mut out = layer.clone();
    for i in 0..rows {
        for j in 0..z {
            out.q.set(i, j, (layer.q.get(i, j) as f64 / sd[j]) as f32);
        }
    }
    for j in 0..z {
        out.q_bias[j] = ((layer.q_bias[j] as f64 - mean[j]) / sd[j]) as f32;
    }
    for o in 0..n {
        let shift: f64 = (0..z).map(|j| layer.r.get(j, o) as f64 * mean[j]).sum();
        out.r_bias[o] = (layer.r_bias[o] as f64 + shift) as f32;
    }
    for j in 0..z {
        for o in 0..n {
            out.r.set(j, o, (layer.r.get(j, o) as f64 * sd[j]) as f32);
        }
    }
    out.norm_mean = mean.iter().map(|&v| v as f32).collect();
    out.norm_var = var.iter().map(|&v| v.max(VAR_EPS) as f32).collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeOptions {
    pub energy: f64,
    pub stats_batches: usize,
    pub stats_batch_size: usize,
    /// Short fine-tune of all factors against labels; skipped when `None` or
    /// when the iteration budget is zero.
    pub finetune: Option<TrainSettings>,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self {
            energy: 0.65,
            stats_batches: 8,
            stats_batch_size: 32,
            finetune: None,
        }
    }
}

/// `(embed index, pointwise index)` of every factor pair in a decomposed net.
pub fn factor_pairs(net: &Network) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.kind() == LayerKind::EmbedConv
            && net.layers.get(i + 1).is_some_and(|l| l.kind() == LayerKind::PointwiseConv)
        {
            pairs.push((i, i + 1));
        }
    }
    pairs
}

/// Name of the source layer of a factor, `conv1/q` → `conv1`.
pub fn base_name(factor: &str) -> &str {
    factor
        .strip_suffix("/q")
        .or_else(|| factor.strip_suffix("/r"))
        .unwrap_or(factor)
}

/// Ranks of every linear layer without building the decomposed network.
pub fn rank_report(net: &Network, e: f64) -> Result<RankReport> {
    let folded = fold_batchnorm(net)?;
    let mut layers = Vec::new();
    for layer in &folded.layers {
        let Some(conv) = layer.as_conv() else { continue };
        if !matches!(conv.kind, LayerKind::Conv2D | LayerKind::Dense) {
            continue;
        }
        layers.push(layer_rank(&decompose_layer(&layer.name, conv, e)?));
    }
    Ok(RankReport {
        version: 1,
        energy: e,
        layers,
    })
}

fn layer_rank(d: &DecomposedLayer) -> LayerRank {
    LayerRank {
        name: d.name.clone(),
        cum_energy: cumulative_energy(&d.singular_values),
        singular_values: d.singular_values.clone(),
        z: d.z,
        n: d.n,
        valid_range: [d.z, d.n],
    }
}

/// Decompose every `Conv2D`/`Dense` layer, optionally fine-tune all factors,
/// then fold embedding normalization from statistics of `data`.
pub fn decompose_network(net: &Network, data: &Dataset, opts: &DecomposeOptions) -> Result<(Network, RankReport)> {
    if net.form != Form::Plain {
        return Err(invalid("decomposition expects a plain network"));
    }
    let [c, h, w] = net.input;
    let img = &data.images;
    if (img.c, img.h, img.w) != (c, h, w) {
        return Err(invalid(format!(
            "dataset samples are {}x{}x{}, network expects {c}x{h}x{w}",
            img.c, img.h, img.w
        )));
    }
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let folded = fold_batchnorm(net)?;
    let mut decomposed = Vec::new();
    let mut layers = Vec::new();
    let mut dense = Vec::new();
    for layer in &folded.layers {
        match layer.as_conv() {
            Some(conv) if matches!(conv.kind, LayerKind::Conv2D | LayerKind::Dense) => {
                let d = decompose_layer(&layer.name, conv, opts.energy)?;
                if d.source == LayerKind::Dense {
                    dense.push(serde_json::Value::from(d.name.clone()));
                }
                layers.extend(d.layers()?);
                decomposed.push(d);
            }
            _ => layers.push(layer.clone()),
        }
    }
    let mut out = Network::new(net.name.clone(), net.input, layers)?;
    out.form = Form::Decomposed;
    out.meta = net.meta.clone();
    set_meta(&mut out, "dense", serde_json::Value::Array(dense));
    set_meta(&mut out, "energy", opts.energy.into());

    if let Some(settings) = opts.finetune.as_ref().filter(|s| s.iters > 0) {
        fit(&mut out, img, &data.labels, settings)?;
    }
    // Statistics of each embedding on a prefix of the data.
    let count = (opts.stats_batches.max(1) * opts.stats_batch_size.max(1)).min(data.len());
    renormalize_embeddings(&mut out, &img.slice(0, count))?;
    let report = RankReport {
        version: 1,
        energy: opts.energy,
        layers: decomposed.iter().map(layer_rank).collect(),
    };
    set_meta(&mut out, "ranks", serde_json::to_value(&report)?);
    Ok((out, report))
}

/// The rank report recorded when `net` was decomposed.
pub fn stored_ranks(net: &Network) -> Result<RankReport> {
    let value = net
        .meta
        .get("ranks")
        .ok_or_else(|| invalid("model carries no rank report; was it produced by decomposition?"))?;
    Ok(serde_json::from_value(value.clone())?)
}

/// Re-standardize every embedding of a decomposed network on `sample`,
/// e.g. after its factors were fine-tuned. Outputs are unchanged.
pub fn renormalize_embeddings(net: &mut Network, sample: &crate::Tensor4) -> Result<()> {
    if net.form != Form::Decomposed {
        return Err(invalid("expected a decomposed network"));
    }
    let pairs = factor_pairs(net);
    let capture: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let (_, trace) = forward(net, sample, &capture)?;
    for &(qi, ri) in &pairs {
        let (mean, var) = channel_moments(&trace.outputs[&qi]);
        let sd: Vec<f64> = var.iter().map(|&v| v.max(VAR_EPS).sqrt()).collect();
        let z = sd.len();
        let q = net.layers[qi].as_conv_mut().ok_or_else(|| invalid("embedding is not a convolution"))?;
        for row in q.weight.chunks_mut(z) {
            for (w, s) in row.iter_mut().zip(&sd) {
                *w = (*w as f64 / s) as f32;
            }
        }
        let qb = q.bias.get_or_insert_with(|| vec![0.0; z]);
        for j in 0..z {
            qb[j] = ((qb[j] as f64 - mean[j]) / sd[j]) as f32;
        }
        let r = net.layers[ri].as_conv_mut().ok_or_else(|| invalid("expansion is not a convolution"))?;
        let n = r.c_out;
        let rb = r.bias.get_or_insert_with(|| vec![0.0; n]);
        for o in 0..n {
            let shift: f64 = (0..z).map(|j| r.weight[j * n + o] as f64 * mean[j]).sum();
            rb[o] = (rb[o] as f64 + shift) as f32;
        }
        for j in 0..z {
            for o in 0..n {
                r.weight[j * n + o] = (r.weight[j * n + o] as f64 * sd[j]) as f32;
            }
        }
    }
    Ok(())
}

/// Per-channel mean and (population) variance over samples and positions.
pub(crate) fn channel_moments(t: &crate::Tensor4) -> (Vec<f64>, Vec<f64>) {
    let per = t.h * t.w;
    let count = (t.n * per) as f64;
    let mut mean = vec![0.0; t.c];
    let mut var = vec![0.0; t.c];
    for c in 0..t.c {
        let mut s = 0.0;
        for b in 0..t.n {
            let base = (b * t.c + c) * per;
            s += t.data()[base..base + per].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0;
        for b in 0..t.n {
            let base = (b * t.c + c) * per;
            ss += t.data()[base..base + per].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / count;
    }
    (mean, var)
}

pub(crate) fn set_meta(net: &mut Network, key: &str, value: serde_json::Value) {
    if !net.meta.is_object() {
        net.meta = serde_json::json!({});
    }
    net.meta[key] = value;
}

/// Outcome of the energy search.
#[derive(Debug, Clone)]
pub struct EnergySearch {
    pub energy: f64,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    /// False when no tried energy brought accuracy within tolerance; the
    /// result then holds the last (largest) energy tried.
    pub recovered: bool,
    pub network: Network,
    pub report: RankReport,
}

/// Raise the energy from `start` in steps of 0.05 up to 0.9 until the
/// decomposed (and fine-tuned) network's validation accuracy is within `tol`
/// of the original.
pub fn search_energy(
    net: &Network,
    train: &Dataset,
    val: &Dataset,
    start: f64,
    tol: f64,
    opts: &DecomposeOptions,
) -> Result<EnergySearch> {
    if !(start > 0.0 && start <= 0.9) {
        return Err(invalid(format!("search start {start} outside (0, 0.9]")));
    }
    let (_, baseline_accuracy) = metrics::evaluate(net, val)?;
    let steps = ((0.9 - start) / 0.05 + 1e-9).floor() as usize;
    let mut last = None;
    for i in 0..=steps {
        let energy = ((start + 0.05 * i as f64) * 1e6).round() / 1e6;
        let (network, report) = decompose_network(
            net,
            train,
            &DecomposeOptions {
                energy,
                ..opts.clone()
            },
        )?;
        let (_, accuracy) = metrics::evaluate(&network, val)?;
        let recovered = baseline_accuracy - accuracy <= tol;
        let found = EnergySearch {
            energy,
            accuracy,
            baseline_accuracy,
            recovered,
            network,
            report,
        };
        if recovered {
            return Ok(found);
        }
        last = Some(found);
    }
    last.ok_or_else(|| invalid("empty energy schedule"))
}
