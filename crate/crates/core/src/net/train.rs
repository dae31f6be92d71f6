//! Backpropagation through the layer stack and momentum SGD, used to train
//! the toy benchmark, for the short fine-tune after decomposition, and for
//! end-to-end fine-tuning of pruned networks.

use super::forward::{conv_forward, relu};
use super::layer::LayerOp;
use super::network::Network;
use super::ops::{col2im_nhwc, maxpool_backward, maxpool_nhwc};
use super::tensor::{FeatureMap, Tensor4};
use crate::error::{invalid, Error, Result};
use crate::linalg::kernels;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Total optimizer steps; the learning rate decays linearly to zero.
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            iters: 0,
            batch: 32,
            seed: 0,
        }
    }
}

/// Gradient of one linear layer.
#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

enum Cache {
    Conv {
        cols: Vec<f32>,
        in_dims: (usize, usize, usize),
        out: FeatureMap<f32>,
    },
    Pool {
        arg: Vec<u32>,
        h: usize,
        w: usize,
    },
    Relu {
        out: FeatureMap<f32>,
    },
    Passthrough,
}

/// Mean softmax cross-entropy and per-sample gradient `(p - onehot) / n`.
pub(crate) fn cross_entropy_grad(logits: &[f32], classes: usize, labels: &[u32]) -> (f64, Vec<f32>) {
    let n = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[label as usize] as f64;
        for (c, e) in exps.iter().enumerate() {
            let p = e / sum;
            let t = if c == label as usize { 1.0 } else { 0.0 };
            grad[s * classes + c] = ((p - t) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

/// Loss and gradients of every linear layer for one batch.
pub fn loss_and_grads(net: &Network, batch: &Tensor4, labels: &[u32]) -> Result<(f64, Vec<Option<ConvGrad>>)> {
    let x: FeatureMap<f32> = batch.to_nhwc();
    loss_and_grads_fm(net, &x, labels)
}

pub(crate) fn loss_and_grads_fm(
    net: &Network,
    x: &FeatureMap<f32>,
    labels: &[u32],
) -> Result<(f64, Vec<Option<ConvGrad>>)> {
    if labels.len() != x.n {
        return Err(invalid("label count differs from batch size"));
    }
    let end = match net.layers.last().map(|l| &l.op) {
        Some(LayerOp::Softmax) => net.layers.len() - 1,
        _ => net.layers.len(),
    };
    let mut caches = Vec::with_capacity(end);
    let mut cur = x.clone();
    for layer in &net.layers[..end] {
        let (next, cache) = match &layer.op {
            LayerOp::Conv(conv) => {
                let (out, cols) = conv_forward(conv, &cur, conv.relu)?;
                let cache = Cache::Conv {
                    cols,
                    in_dims: (cur.h, cur.w, cur.c),
                    out: out.clone(),
                };
                (out, cache)
            }
            LayerOp::MaxPool { k, stride } => {
                let (out, arg) = maxpool_nhwc(&cur, *k, *stride)?;
                (out, Cache::Pool { arg, h: cur.h, w: cur.w })
            }
            LayerOp::Relu => {
                let out = relu(&cur);
                (out.clone(), Cache::Relu { out })
            }
            LayerOp::BatchNorm(_) => {
                return Err(Error::UnsupportedStructure(format!(
                    "training through batch norm '{}'; fold it first",
                    layer.name
                )))
            }
            LayerOp::Softmax => (cur.clone(), Cache::Passthrough),
        };
        caches.push(cache);
        cur = next;
    }
    if cur.h != 1 || cur.w != 1 {
        return Err(Error::UnsupportedStructure("classifier output must be 1x1 spatially".into()));
    }
    let classes = cur.c;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let (loss, g) = cross_entropy_grad(&cur.data, classes, labels);
    let mut grad = FeatureMap { data: g, ..cur };

    let mut grads: Vec<Option<ConvGrad>> = vec![None; net.layers.len()];
    for i in (0..end).rev() {
        match (&net.layers[i].op, &caches[i]) {
            (LayerOp::Conv(conv), Cache::Conv { cols, in_dims, out }) => {
                if conv.relu {
                    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                let rows = grad.positions();
                let dw = kernels::gemm_tn_f64(cols, &grad.data, rows, conv.patch_len(), conv.c_out);
                let db = kernels::col_sums(&grad.data, rows, conv.c_out);
                grads[i] = Some(ConvGrad { weight: dw, bias: db });
                if i > 0 {
                    let dcols = kernels::gemm_nt(&grad.data, &conv.weight, rows, conv.c_out, conv.patch_len());
                    let (h, w, c) = *in_dims;
                    grad = col2im_nhwc(&dcols, grad.n, h, w, c, conv.k, conv.pad, conv.stride);
                }
            }
            (LayerOp::MaxPool { .. }, Cache::Pool { arg, h, w }) => {
                grad = maxpool_backward(&grad, arg, *h, *w);
            }
            (LayerOp::Relu, Cache::Relu { out }) => {
                for (g, &o) in grad.data.iter_mut().zip(&out.data) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            _ => {}
        }
    }
    Ok((loss, grads))
}

/// Momentum SGD state over the linear layers of one network.
pub(crate) struct Momentum {
    velocity: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Momentum {
    pub fn new(net: &Network) -> Self {
        let velocity = net
            .layers
            .iter()
            .map(|l| l.as_conv().map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.c_out])))
            .collect();
        Self { velocity }
    }

    pub fn step(&mut self, net: &mut Network, grads: &[Option<ConvGrad>], lr: f64, momentum: f64, weight_decay: f64) {
        for ((layer, g), v) in net.layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            let (Some(conv), Some(g), Some((vw, vb))) = (layer.as_conv_mut(), g, v.as_mut()) else {
                continue;
            };
            for ((w, &gw), vw) in conv.weight.iter_mut().zip(&g.weight).zip(vw.iter_mut()) {
                *vw = momentum * *vw + gw + weight_decay * *w as f64;
                *w = (*w as f64 - lr * *vw) as f32;
            }
            let bias = conv.bias.get_or_insert_with(|| vec![0.0; g.bias.len()]);
            for ((b, &gb), vb) in bias.iter_mut().zip(&g.bias).zip(vb.iter_mut()) {
                *vb = momentum * *vb + gb;
                *b = (*b as f64 - lr * *vb) as f32;
            }
        }
    }
}

/// Train every linear layer with mini-batch momentum SGD. Returns the batch
/// loss of every step.
pub fn fit(net: &mut Network, x: &Tensor4, labels: &[u32], settings: &TrainSettings) -> Result<Vec<f64>> {
    if x.n == 0 || x.n != labels.len() {
        return Err(invalid("training set is empty or mislabeled"));
    }
    if settings.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let fm: FeatureMap<f32> = x.to_nhwc();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..x.n).collect();
    let mut cursor = x.n;
    let mut opt = Momentum::new(net);
    let mut history = Vec::with_capacity(settings.iters);
    let batch = settings.batch.min(x.n);
    for t in 0..settings.iters {
        if cursor + batch > x.n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = fm.select_samples(idx);
        let yb: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = loss_and_grads_fm(net, &xb, &yb)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                layer: net.name.clone(),
                loss,
                initial: history.first().copied().unwrap_or(f64::NAN),
            });
        }
        history.push(loss);
        let lr = settings.lr as f64 * (1.0 - t as f64 / settings.iters as f64);
        opt.step(net, &grads, lr, settings.momentum as f64, settings.weight_decay as f64);
    }
    Ok(history)
}
