use super::layer::{Layer, LayerKind, LayerOp};
use super::ops::conv_out_dim;
use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Plain,
    Decomposed,
    Slim,
}

/// Ordered layer stack with its input shape `[c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub input: [usize; 3],
    pub form: Form,
    pub layers: Vec<Layer>,
    /// Per-layer keep masks recorded by pruning (1 = kept).
    pub masks: BTreeMap<String, Vec<u8>>,
    /// Free-form provenance (seed, configuration) carried into model files.
    pub meta: serde_json::Value,
}

impl Network {
    pub fn new(name: impl Into<String>, input: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            name: name.into(),
            input,
            form: Form::Plain,
            layers,
            masks: BTreeMap::new(),
            meta: serde_json::Value::Null,
        };
        net.shapes()?;
        Ok(net)
    }

    /// Output shape `[c, h, w]` of every layer, validating the chain.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let [c, h, w] = cur;
            let bad = |msg: String| invalid(format!("layer {} ({}): {msg}", i, layer.name));
            cur = match &layer.op {
                LayerOp::Conv(conv) => {
                    if conv.c_in != c {
                        return Err(bad(format!("expects {} input channels, got {c}", conv.c_in)));
                    }
                    if conv.kind == LayerKind::Dense && (h != conv.k || w != conv.k) {
                        return Err(bad(format!("dense layer expects a {0}x{0} map, got {h}x{w}", conv.k)));
                    }
                    let ho = conv_out_dim(h, conv.k, conv.pad, conv.stride);
                    let wo = conv_out_dim(w, conv.k, conv.pad, conv.stride);
                    match (ho, wo) {
                        (Some(ho), Some(wo)) => [conv.c_out, ho, wo],
                        _ => return Err(bad("kernel larger than padded input".into())),
                    }
                }
                LayerOp::MaxPool { k, stride } => match (conv_out_dim(h, *k, 0, *stride), conv_out_dim(w, *k, 0, *stride)) {
                    (Some(ho), Some(wo)) => [c, ho, wo],
                    _ => return Err(bad("pool window larger than input".into())),
                },
                LayerOp::Relu => cur,
                LayerOp::BatchNorm(bn) => {
                    if bn.channels() != c {
                        return Err(bad(format!("batch norm over {} channels, input has {c}", bn.channels())));
                    }
                    cur
                }
                LayerOp::Softmax => {
                    if i != last {
                        return Err(bad("softmax must be the terminal layer".into()));
                    }
                    cur
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Input shape of layer `i`.
    pub fn input_shape_of(&self, i: usize) -> Result<[usize; 3]> {
        if i == 0 {
            return Ok(self.input);
        }
        Ok(self.shapes()?[i - 1])
    }

    pub fn output_shape(&self) -> Result<[usize; 3]> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input))
    }

    pub fn linear_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind().is_linear())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Index of the next linear layer after `i`, with only parameter-free
    /// layers in between.
    pub fn next_linear(&self, i: usize) -> Result<Option<usize>> {
        for j in i + 1..self.layers.len() {
            match self.layers[j].kind() {
                k if k.is_linear() => return Ok(Some(j)),
                LayerKind::MaxPool | LayerKind::ReLU | LayerKind::Softmax => {}
                LayerKind::BatchNorm => {
                    return Err(Error::UnsupportedStructure(format!(
                        "batch norm '{}' between linear layers; fold it first",
                        self.layers[j].name
                    )))
                }
                _ => unreachable!(),
            }
        }
        Ok(None)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.as_conv())
            .map(|c| c.weight.len() + c.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }
}
