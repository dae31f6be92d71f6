//! Single-file model format, little-endian:
//! `"LDRF" | u32 version | u64 manifest length | JSON manifest | f32 blob`.
//! Segment offsets in the manifest are byte offsets into the blob.

use super::layer::{BatchNorm, Conv, Layer, LayerKind, LayerOp};
use super::network::{Form, Network};
use crate::error::{format_err, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"LDRF";
pub const MODEL_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    name: String,
    form: Form,
    input: [usize; 3],
    layers: Vec<LayerEntry>,
    #[serde(default)]
    masks: BTreeMap<String, Vec<u8>>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Segment {
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_out: Option<usize>,
    #[serde(default)]
    relu: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    /// Named float segments in blob order.
    #[serde(default)]
    tensors: Vec<(String, Segment)>,
}

struct BlobWriter {
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, vals: &[f32]) -> (String, Segment) {
        let seg = Segment {
            offset: self.blob.len() as u64,
            len: vals.len() as u64,
        };
        for v in vals {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        (name.to_string(), seg)
    }
}

pub fn model_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut w = BlobWriter { blob: Vec::new() };
    let mut entries = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let mut e = LayerEntry {
            name: layer.name.clone(),
            kind: layer.kind(),
            k: None,
            pad: None,
            stride: None,
            c_in: None,
            c_out: None,
            relu: false,
            eps: None,
            tensors: Vec::new(),
        };
        match &layer.op {
            LayerOp::Conv(c) => {
                e.k = Some(c.k);
                e.pad = Some(c.pad);
                e.stride = Some(c.stride);
                e.c_in = Some(c.c_in);
                e.c_out = Some(c.c_out);
                e.relu = c.relu;
                e.tensors.push(w.push("weight", &c.weight));
                if let Some(b) = &c.bias {
                    e.tensors.push(w.push("bias", b));
                }
            }
            LayerOp::MaxPool { k, stride } => {
                e.k = Some(*k);
                e.stride = Some(*stride);
            }
            LayerOp::BatchNorm(bn) => {
                e.c_in = Some(bn.channels());
                e.c_out = Some(bn.channels());
                e.eps = Some(bn.eps);
                e.tensors.push(w.push("gamma", &bn.gamma));
                e.tensors.push(w.push("beta", &bn.beta));
                e.tensors.push(w.push("mean", &bn.mean));
                e.tensors.push(w.push("var", &bn.var));
            }
            LayerOp::Relu | LayerOp::Softmax => {}
        }
        entries.push(e);
    }
    let manifest = Manifest {
        version: MODEL_VERSION,
        name: net.name.clone(),
        form: net.form,
        input: net.input,
        layers: entries,
        masks: net.masks.clone(),
        meta: net.meta.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + json.len() + w.blob.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.blob);
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(format_err(bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != MODEL_MAGIC {
        return Err(format_err(0, "bad magic, expected \"LDRF\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let blob_start = HEADER_LEN
        .checked_add(mlen)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| format_err(8, format!("manifest length {mlen} exceeds file size {}", bytes.len())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN as usize..blob_start as usize])
        .map_err(|e| format_err(HEADER_LEN, format!("manifest: {e}")))?;
    if manifest.version != MODEL_VERSION {
        return Err(format_err(HEADER_LEN, format!("manifest version {}", manifest.version)));
    }
    let blob = &bytes[blob_start as usize..];

    let mut expected_blob = 0u64;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for e in &manifest.layers {
        let read = |name: &str, expect: usize, expected_blob: &mut u64| -> Result<Vec<f32>> {
            let seg = e
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| *s)
                .ok_or_else(|| format_err(HEADER_LEN, format!("layer '{}': missing {name} segment", e.name)))?;
            if seg.len != expect as u64 {
                return Err(format_err(
                    blob_start + seg.offset,
                    format!(
                        "layer '{}': {name} segment holds {} values but the declared shape needs {expect}",
                        e.name, seg.len
                    ),
                ));
            }
            let end = seg.offset + seg.len * 4;
            if end > blob.len() as u64 {
                return Err(format_err(
                    blob.len() as u64 + blob_start,
                    format!("layer '{}': {name} segment runs past end of file (truncated blob)", e.name),
                ));
            }
            *expected_blob += seg.len * 4;
            let raw = &blob[seg.offset as usize..end as usize];
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(format_err(blob_start + seg.offset, format!("layer '{}': non-finite {name}", e.name)));
            }
            Ok(vals)
        };
        let need = |v: Option<usize>, field: &str| {
            v.ok_or_else(|| format_err(HEADER_LEN, format!("layer '{}': missing field {field}", e.name)))
        };
        let op = match e.kind {
            k if k.is_linear() => {
                let (kk, c_in, c_out) = (need(e.k, "k")?, need(e.c_in, "c_in")?, need(e.c_out, "c_out")?);
                let weight = read("weight", kk * kk * c_in * c_out, &mut expected_blob)?;
                let bias = if e.tensors.iter().any(|(n, _)| n == "bias") {
                    Some(read("bias", c_out, &mut expected_blob)?)
                } else {
                    None
                };
                let conv = Conv::new(k, kk, e.pad.unwrap_or(0), need(e.stride, "stride")?, c_in, c_out, weight, bias, e.relu)
                    .map_err(|err| format_err(HEADER_LEN, format!("layer '{}': {err}", e.name)))?;
                LayerOp::Conv(conv)
            }
            LayerKind::MaxPool => LayerOp::MaxPool {
                k: need(e.k, "k")?,
                stride: need(e.stride, "stride")?,
            },
            LayerKind::ReLU => LayerOp::Relu,
            LayerKind::Softmax => LayerOp::Softmax,
            LayerKind::BatchNorm => {
                let c = need(e.c_out, "c_out")?;
                LayerOp::BatchNorm(BatchNorm {
                    gamma: read("gamma", c, &mut expected_blob)?,
                    beta: read("beta", c, &mut expected_blob)?,
                    mean: read("mean", c, &mut expected_blob)?,
                    var: read("var", c, &mut expected_blob)?,
                    eps: e.eps.unwrap_or(1e-5),
                })
            }
            _ => unreachable!(),
        };
        layers.push(Layer::new(e.name.clone(), op));
    }
    if expected_blob != blob.len() as u64 {
        return Err(format_err(
            blob_start + expected_blob.min(blob.len() as u64),
            format!("blob holds {} bytes but the manifest accounts for {expected_blob}", blob.len()),
        ));
    }
    let net = Network {
        name: manifest.name,
        input: manifest.input,
        form: manifest.form,
        layers,
        masks: manifest.masks,
        meta: manifest.meta,
    };
    net.shapes()
        .map_err(|e| format_err(HEADER_LEN, format!("inconsistent layer chain: {e}")))?;
    Ok(net)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_bytes(net)?).map_err(Error::from)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    model_from_bytes(&std::fs::read(path)?)
}
