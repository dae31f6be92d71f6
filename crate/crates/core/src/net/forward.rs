use super::layer::{Conv, LayerOp};
use super::network::Network;
use super::ops::{im2col_nhwc, maxpool_nhwc};
use super::tensor::{FeatureMap, Tensor4};
use crate::error::{invalid, Result};
use crate::linalg::kernels::{self, Elem};
use crate::linalg::Matrix;
use std::collections::BTreeMap;
use std::ops::Range;

/// Layer outputs captured during a forward pass, keyed by layer index.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub outputs: BTreeMap<usize, Tensor4>,
}

/// Samples per internal chunk when running large inputs.
const CHUNK: usize = 256;

/// Run the whole network. `logits` has one row per sample and is the input to
/// a terminal softmax (or the final output when there is none), flattened in
/// `c, h, w` order.
pub fn forward(net: &Network, batch: &Tensor4, capture: &[usize]) -> Result<(Matrix, ActivationTrace)> {
    let [c, h, w] = net.input;
    if batch.c != c || batch.h != h || batch.w != w {
        return Err(invalid(format!(
            "batch shape {}x{}x{} does not match network input {c}x{h}x{w}",
            batch.c, batch.h, batch.w
        )));
    }
    if let Some(&bad) = capture.iter().find(|&&i| i >= net.layers.len()) {
        return Err(invalid(format!("capture index {bad} out of range")));
    }
    net.shapes()?;
    let mut trace = ActivationTrace::default();
    let mut outs = Vec::new();
    let end = logits_end(net);
    for start in (0..batch.n).step_by(CHUNK) {
        let stop = (start + CHUNK).min(batch.n);
        let x: FeatureMap<f32> = batch.slice(start, stop).to_nhwc();
        let mut captured: BTreeMap<usize, FeatureMap<f32>> = BTreeMap::new();
        let y = run_layers(net, x, 0..end, &mut |i, fm| {
            if capture.contains(&i) {
                captured.insert(i, fm.clone());
            }
        })?;
        for (i, fm) in captured {
            let t = fm.to_tensor();
            match trace.outputs.get_mut(&i) {
                Some(prev) => {
                    let mut data = prev.data().to_vec();
                    data.extend_from_slice(t.data());
                    *prev = Tensor4::new(prev.n + t.n, t.c, t.h, t.w, data)?;
                }
                None => {
                    trace.outputs.insert(i, t);
                }
            }
        }
        outs.push(y);
    }
    // A terminal softmax is captured as its normalized output.
    if end < net.layers.len() && capture.contains(&end) {
        let logits = outputs_to_matrix(&outs);
        let probs = softmax_rows(&logits);
        trace
            .outputs
            .insert(end, Tensor4::new(probs.rows(), probs.cols(), 1, 1, probs.into_data())?);
    }
    Ok((outputs_to_matrix(&outs), trace))
}

/// Logits only, no capture.
pub fn predict(net: &Network, batch: &Tensor4) -> Result<Matrix> {
    Ok(forward(net, batch, &[])?.0)
}

fn logits_end(net: &Network) -> usize {
    match net.layers.last().map(|l| &l.op) {
        Some(LayerOp::Softmax) => net.layers.len() - 1,
        _ => net.layers.len(),
    }
}

fn outputs_to_matrix(outs: &[FeatureMap<f32>]) -> Matrix {
    let mut rows = 0;
    let mut cols = 0;
    let mut data = Vec::new();
    for fm in outs {
        let t = fm.to_tensor();
        rows += t.n;
        cols = t.c * t.h * t.w;
        data.extend_from_slice(t.data());
    }
    Matrix::from_parts_unchecked(rows, cols, data)
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let cols = out.cols();
    for r in 0..out.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (o, e) in row.iter_mut().zip(exps) {
            *o = (e / sum) as f32;
        }
    }
    out
}

/// Run `layers[range]` on a channels-last buffer, reporting each output.
pub(crate) fn run_layers(
    net: &Network,
    mut x: FeatureMap<f32>,
    range: Range<usize>,
    on_output: &mut dyn FnMut(usize, &FeatureMap<f32>),
) -> Result<FeatureMap<f32>> {
    for i in range {
        x = apply_layer(&net.layers[i].op, &x)?;
        on_output(i, &x);
    }
    Ok(x)
}

/// Run a layer range on a large buffer in sample chunks.
pub(crate) fn run_range_chunked(net: &Network, x: &FeatureMap<f32>, range: Range<usize>) -> Result<FeatureMap<f32>> {
    let mut parts = Vec::new();
    for start in (0..x.n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(x.n)).collect();
        parts.push(run_layers(net, x.select_samples(&idx), range.clone(), &mut |_, _| {})?);
    }
    Ok(FeatureMap::concat(parts).unwrap_or_else(|| x.clone()))
}

pub(crate) fn apply_layer(op: &LayerOp, x: &FeatureMap<f32>) -> Result<FeatureMap<f32>> {
    Ok(match op {
        LayerOp::Conv(conv) => conv_forward(conv, x, conv.relu)?.0,
        LayerOp::MaxPool { k, stride } => maxpool_nhwc(x, *k, *stride)?.0,
        LayerOp::Relu => relu(x),
        LayerOp::BatchNorm(bn) => {
            let aff = bn.affine();
            let mut y = x.clone();
            for p in 0..y.positions() {
                for (c, &(s, t)) in aff.iter().enumerate() {
                    let v = &mut y.data[p * y.c + c];
                    *v = (s * *v as f64 + t) as f32;
                }
            }
            y
        }
        LayerOp::Softmax => {
            let m = Matrix::from_parts_unchecked(x.positions(), x.c, x.data.clone());
            FeatureMap {
                data: softmax_rows(&m).into_data(),
                ..x.clone()
            }
        }
    })
}

pub(crate) fn relu<T: Elem>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let zero = T::default();
    FeatureMap {
        data: x.data.iter().map(|&v| if v > zero { v } else { zero }).collect(),
        ..*x
    }
}

/// Convolution; returns `(output, patch matrix)`. The patch matrix is kept
/// for backpropagation.
pub(crate) fn conv_forward<T: Elem>(
    conv: &Conv,
    x: &FeatureMap<T>,
    apply_relu: bool,
) -> Result<(FeatureMap<T>, Vec<T>)> {
    if x.c != conv.c_in {
        return Err(invalid(format!(
            "convolution expects {} channels, got {}",
            conv.c_in, x.c
        )));
    }
    let (cols, ho, wo) = im2col_nhwc(x, conv.k, conv.pad, conv.stride)?;
    let rows = x.n * ho * wo;
    let w: Vec<T> = conv.weight.iter().map(|&v| T::from_f64(v as f64)).collect();
    let mut out = kernels::gemm(&cols, &w, rows, conv.patch_len(), conv.c_out);
    if let Some(b) = &conv.bias {
        for r in 0..rows {
            for (o, &bv) in out[r * conv.c_out..(r + 1) * conv.c_out].iter_mut().zip(b) {
                *o = T::from_f64(o.to_f64() + bv as f64);
            }
        }
    }
    if apply_relu {
        let zero = T::default();
        out.iter_mut().for_each(|v| {
            if !(*v > zero) {
                *v = zero
            }
        });
    }
    Ok((
        FeatureMap {
            n: x.n,
            h: ho,
            w: wo,
            c: conv.c_out,
            data: out,
        },
        cols,
    ))
}

impl std::ops::Deref for ActivationTrace {
    type Target = BTreeMap<usize, Tensor4>;
    fn deref(&self) -> &Self::Target {
        &self.outputs
    }
}
