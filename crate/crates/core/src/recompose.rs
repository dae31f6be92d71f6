//! Stage three: multiply adjacent factors back into single layers, drop the
//! pruned channels, and check that nothing changed on the way.

use crate::decompose::{base_name, factor_pairs};
use crate::error::{invalid, Error, Result};
use crate::linalg::kernels;
use crate::net::{predict, Conv, Form, Layer, LayerKind, Network, Tensor4};
use crate::pruner::Mask;
use std::collections::BTreeMap;

/// A recomposed layer with the mask that was applied to its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SlimLayer {
    pub source: String,
    pub conv: Conv,
    pub mask: Option<Mask>,
}

/// `W' = Q'·R'` with bias `R'ᵀ·q_bias + r_bias`, as one layer of kind `kind`
/// (`Conv2D` or `Dense`) with the embedding factor's geometry.
pub fn recompose_layer(q: &Conv, r: &Conv, kind: LayerKind) -> Result<Conv> {
    if r.k != 1 || r.stride != 1 || r.pad != 0 {
        return Err(invalid("transformation factor must be a 1x1 stride-1 convolution"));
    }
    if q.c_out != r.c_in {
        return Err(invalid(format!(
            "inner dimensions differ: embedding has {} outputs, transformation expects {}",
            q.c_out, r.c_in
        )));
    }
    if !matches!(kind, LayerKind::Conv2D | LayerKind::Dense) {
        return Err(invalid(format!("cannot recompose into {kind:?}")));
    }
    let (rows, z, n) = (q.patch_len(), q.c_out, r.c_out);
    let w = kernels::gemm(&q.weight, &r.weight, rows, z, n);
    let qb = q.bias_or_zero();
    let rb = r.bias_or_zero();
    let bias: Vec<f32> = (0..n)
        .map(|o| {
            let s: f64 = (0..z).map(|j| r.weight[j * n + o] as f64 * qb[j] as f64).sum();
            (s + rb[o] as f64) as f32
        })
        .collect();
    Conv::new(kind, q.k, q.pad, q.stride, q.c_in, n, w, Some(bias), r.relu)
}

/// Merge every factor pair of a decomposed network. Masks are carried over
/// unchanged.
pub fn recompose_network(net: &Network) -> Result<Network> {
    if net.form != Form::Decomposed {
        return Err(invalid("recomposition expects a decomposed network"));
    }
    let dense: Vec<&str> = net
        .meta
        .get("dense")
        .and_then(|v| v.as_array())
        .map(|a| a.iter().filter_map(|v| v.as_str()).collect())
        .unwrap_or_default();
    let pairs = factor_pairs(net);
    let mut layers = Vec::with_capacity(net.layers.len() - pairs.len());
    let mut i = 0;
    while i < net.layers.len() {
        if let Some(&(qi, ri)) = pairs.iter().find(|p| p.0 == i) {
            let (q, r) = (&net.layers[qi], &net.layers[ri]);
            let name = base_name(&q.name);
            let kind = if dense.contains(&name) {
                LayerKind::Dense
            } else {
                LayerKind::Conv2D
            };
            let merged = recompose_layer(q.as_conv().expect("factor"), r.as_conv().expect("factor"), kind)?;
            layers.push(Layer::conv(name, merged));
            i = ri + 1;
        } else {
            let layer = &net.layers[i];
            if matches!(layer.kind(), LayerKind::EmbedConv | LayerKind::PointwiseConv) {
                return Err(Error::UnsupportedStructure(format!(
                    "factor '{}' has no partner",
                    layer.name
                )));
            }
            layers.push(layer.clone());
            i += 1;
        }
    }
    let mut out = Network::new(net.name.clone(), net.input, layers)?;
    out.masks = net.masks.clone();
    out.meta = net.meta.clone();
    Ok(out)
}

/// Recomposed layers with their masks.
pub fn slim_layers(net: &Network) -> Result<Vec<SlimLayer>> {
    let merged = recompose_network(net)?;
    merged
        .layers
        .iter()
        .filter_map(|l| l.as_conv().map(|c| (l, c)))
        .map(|(l, c)| {
            Ok(SlimLayer {
                source: l.name.clone(),
                conv: c.clone(),
                mask: net.masks.get(&l.name).map(|b| Mask::from_bits(b)).transpose()?,
            })
        })
        .collect()
}

/// Remove the output channels each mask drops, and the matching input slices
/// of the next linear layer. Exactly output-preserving when the dropped
/// channels already carry zero.
pub fn strip_pruned(net: &Network, masks: &BTreeMap<String, Vec<u8>>) -> Result<Network> {
    let mut layers = net.layers.clone();
    for (name, bits) in masks {
        let mask = Mask::from_bits(bits)?;
        let i = net
            .find(name)
            .ok_or_else(|| invalid(format!("mask for unknown layer '{name}'")))?;
        let conv = layers[i]
            .as_conv()
            .ok_or_else(|| invalid(format!("mask on non-linear layer '{name}'")))?;
        if mask.len() != conv.c_out {
            return Err(invalid(format!(
                "mask for '{name}' has {} entries, layer has {} outputs",
                mask.len(),
                conv.c_out
            )));
        }
        if mask.count() == 0 {
            return Err(invalid(format!("mask for '{name}' drops every channel")));
        }
        let Some(next) = net.next_linear(i)? else {
            return Err(invalid(format!("'{name}' is the classifier; its outputs cannot be masked")));
        };
        let kept = mask.kept();
        let sliced = conv.select_outputs(&kept);
        layers[i] = Layer::conv(name.clone(), sliced);
        let nconv = layers[next].as_conv().expect("linear layer");
        let sliced = nconv.select_inputs(&kept);
        layers[next] = Layer::conv(layers[next].name.clone(), sliced);
    }
    let mut out = Network::new(net.name.clone(), net.input, layers)?;
    out.form = Form::Slim;
    out.masks = masks.clone();
    out.meta = net.meta.clone();
    Ok(out)
}

/// Recompose a pruned decomposed network and strip its recorded masks.
pub fn recompose(net: &Network) -> Result<Network> {
    let merged = recompose_network(net)?;
    strip_pruned(&merged, &net.masks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub max_abs_dev: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Largest absolute logit difference between two networks on `data`.
pub fn verify_equivalence(a: &Network, b: &Network, data: &Tensor4, tol: f64) -> Result<Equivalence> {
    if a.input != b.input {
        return Err(invalid(format!(
            "input shapes differ: {:?} vs {:?}",
            a.input, b.input
        )));
    }
    if a.output_shape()? != b.output_shape()? {
        return Err(invalid("output shapes differ"));
    }
    let la = predict(a, data)?;
    let lb = predict(b, data)?;
    let max_abs_dev = la.max_abs_diff(&lb);
    Ok(Equivalence {
        max_abs_dev,
        tol,
        pass: max_abs_dev <= tol,
    })
}
