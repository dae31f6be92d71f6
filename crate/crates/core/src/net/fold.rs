use super::layer::LayerOp;
use super::network::Network;
use crate::error::{Error, Result};

/// Absorb every batch-norm layer into the linear layer right before it.
pub fn fold_batchnorm(net: &Network) -> Result<Network> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let LayerOp::BatchNorm(bn) = &layer.op else {
            layers.push(layer.clone());
            continue;
        };
        let prev = layers.last_mut().and_then(|l: &mut super::layer::Layer| l.as_conv_mut());
        let Some(conv) = prev else {
            return Err(Error::UnsupportedStructure(format!(
                "batch norm '{}' is not preceded by a linear layer",
                layer.name
            )));
        };
        if conv.relu {
            return Err(Error::UnsupportedStructure(format!(
                "batch norm '{}' follows an activation and cannot be folded",
                layer.name
            )));
        }
        if bn.channels() != conv.c_out {
            return Err(Error::UnsupportedStructure(format!(
                "batch norm '{}' channel count differs from its linear layer",
                layer.name
            )));
        }
        let aff = bn.affine();
        let n = conv.c_out;
        for (i, w) in conv.weight.iter_mut().enumerate() {
            *w = (*w as f64 * aff[i % n].0) as f32;
        }
        let bias = conv.bias_or_zero();
        conv.bias = Some(
            bias.iter()
                .zip(&aff)
                .map(|(&b, &(s, t))| (b as f64 * s + t) as f32)
                .collect(),
        );
    }
    Ok(Network {
        layers,
        ..net.clone()
    })
}
