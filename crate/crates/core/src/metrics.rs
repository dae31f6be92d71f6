//! Multiply-accumulate accounting, sparsity, theoretical speed-up, and
//! classification evaluation.

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::net::train::cross_entropy_grad;
use crate::net::{predict, Conv, Layer, LayerKind, LayerOp, Network};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which layers count towards a cost total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Convolutions only (including both factors of decomposed layers).
    Conv,
    /// Every linear layer, dense ones included.
    All,
}

impl Scope {
    pub fn includes(self, kind: LayerKind) -> bool {
        match self {
            Scope::Conv => matches!(kind, LayerKind::Conv2D | LayerKind::EmbedConv | LayerKind::PointwiseConv),
            Scope::All => kind.is_linear(),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Conv => "conv",
            Scope::All => "all",
        })
    }
}

impl FromStr for Scope {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Scope::Conv),
            "all" => Ok(Scope::All),
            _ => Err(invalid(format!("unknown scope '{s}' (expected conv or all)"))),
        }
    }
}

/// MACs of one layer on a `[c, h, w]` input. Parameter-free layers cost 0.
pub fn layer_macs(layer: &Layer, input: [usize; 3]) -> u64 {
    match &layer.op {
        LayerOp::Conv(conv) => conv_macs(conv, input[1], input[2]),
        _ => 0,
    }
}

fn conv_macs(conv: &Conv, h: usize, w: usize) -> u64 {
    let ho = (h + 2 * conv.pad).saturating_sub(conv.k) / conv.stride + 1;
    let wo = (w + 2 * conv.pad).saturating_sub(conv.k) / conv.stride + 1;
    (conv.k * conv.k * conv.c_in * conv.c_out) as u64 * (ho * wo) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub version: u32,
    pub scope: Scope,
    pub layers: Vec<LayerCost>,
    pub total: u64,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,c_in,c_out,macs\n");
        for l in &self.layers {
            out.push_str(&format!("{},{:?},{},{},{}\n", l.name, l.kind, l.c_in, l.c_out, l.macs));
        }
        out
    }
}

/// Per-layer MACs of every in-scope layer.
pub fn cost_report(net: &Network, scope: Scope) -> Result<CostReport> {
    let shapes = net.shapes()?;
    let mut layers = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let Some(conv) = layer.as_conv() else { continue };
        if !scope.includes(conv.kind) {
            continue;
        }
        let input = if i == 0 { net.input } else { shapes[i - 1] };
        layers.push(LayerCost {
            name: layer.name.clone(),
            kind: conv.kind,
            c_in: conv.c_in,
            c_out: conv.c_out,
            macs: layer_macs(layer, input),
        });
    }
    let total = layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        version: 1,
        scope,
        layers,
        total,
    })
}

/// `MACs(original) / MACs(pruned)` over `scope`.
pub fn speedup(original: &Network, pruned: &Network, scope: Scope) -> Result<f64> {
    if original.input != pruned.input {
        return Err(invalid("networks take different inputs"));
    }
    let a = cost_report(original, scope)?.total;
    let b = cost_report(pruned, scope)?.total;
    if b == 0 {
        return Err(invalid("pruned network has zero cost in scope"));
    }
    Ok(a as f64 / b as f64)
}

/// Weight sparsity counting both dropped filters and dropped input channels:
/// `1 − c'·n' / (c·n)`.
pub fn sparsity(c: usize, n: usize, c_kept: usize, n_kept: usize) -> f64 {
    1.0 - (c_kept * n_kept) as f64 / (c * n) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub c: usize,
    pub n: usize,
    pub c_kept: usize,
    pub n_kept: usize,
    pub sparsity: f64,
    /// Percentage rounded to one decimal, for display.
    pub percent: f64,
}

/// Sparsity of every layer given `(inputs, outputs)` before and after.
pub fn sparsity_report(original: &[(usize, usize)], pruned: &[(usize, usize)]) -> Result<Vec<LayerSparsity>> {
    if original.len() != pruned.len() {
        return Err(invalid("layer counts differ"));
    }
    original
        .iter()
        .zip(pruned)
        .map(|(&(c, n), &(ck, nk))| {
            if c == 0 || n == 0 || ck > c || nk > n {
                return Err(invalid(format!("pruned shape {ck}x{nk} is not within {c}x{n}")));
            }
            let s = sparsity(c, n, ck, nk);
            Ok(LayerSparsity {
                c,
                n,
                c_kept: ck,
                n_kept: nk,
                sparsity: s,
                percent: (s * 1000.0).round() / 10.0,
            })
        })
        .collect()
}

/// Chained channel counts `(c_l, n_l)` from an input channel count and the
/// layer widths: `c_1 = input`, `c_l = n_{l−1}`.
pub fn chain(input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut c = input;
    widths
        .iter()
        .map(|&n| {
            let pair = (c, n);
            c = n;
            pair
        })
        .collect()
}

/// Mean softmax cross-entropy and top-1 accuracy.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let logits = predict(net, &data.images)?;
    let classes = logits.cols();
    if classes != data.classes {
        return Err(invalid(format!(
            "network has {classes} outputs, dataset has {} classes",
            data.classes
        )));
    }
    let (loss, _) = cross_entropy_grad(logits.data(), classes, &data.labels);
    let correct = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == data.labels[r] as usize
        })
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

/// VGG-9 for 32×32 inputs: `(2×64C3)-MP2-(2×128C3)-MP2-(2×256C3)-MP2-
/// (2×512FC)-10FC`, with the six convolution widths given by `widths`.
/// Weights are zero; the network is meant for cost accounting.
pub fn vgg9(widths: [usize; 6]) -> Result<Network> {
    let mut layers = Vec::new();
    let names = ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2"];
    let mut c = 3;
    for (i, (&n, name)) in widths.iter().zip(names).enumerate() {
        layers.push(Layer::conv(name, Conv::same(3, c, n, vec![0.0; 9 * c * n], None, true)?));
        if i % 2 == 1 {
            layers.push(Layer::new(format!("pool{}", i / 2 + 1), LayerOp::MaxPool { k: 2, stride: 2 }));
        }
        c = n;
    }
    layers.push(Layer::conv("fc1", Conv::dense(4, c, 512, vec![0.0; 16 * c * 512], None, true)?));
    layers.push(Layer::conv("fc2", Conv::dense(1, 512, 512, vec![0.0; 512 * 512], None, true)?));
    layers.push(Layer::conv("fc3", Conv::dense(1, 512, 10, vec![0.0; 5120], None, false)?));
    layers.push(Layer::new("softmax", LayerOp::Softmax));
    Network::new("vgg9", [3, 32, 32], layers)
}
