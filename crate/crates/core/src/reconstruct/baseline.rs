use super::ldrf::layer_seed;
use crate::data::Dataset;
use crate::decompose::set_meta;
use crate::error::{invalid, Error, Result};
use crate::linalg::{lstsq, Matrix};
use crate::net::ops::im2col_nhwc;
use crate::net::{apply_layer, conv_forward, fold_batchnorm, run_range_chunked, Conv, FeatureMap, Form, LayerKind, LayerOp, Network, Tensor4};
use crate::pruner::{build_mask, score_neurons, Criterion, PruneConfig};
use serde::{Deserialize, Serialize};

const SCORE_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineLayer {
    pub layer: String,
    /// Input channels kept.
    pub inputs: usize,
    /// `‖AX − Y‖ / ‖Y‖` of the refit.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub version: u32,
    pub method: String,
    pub seed: u64,
    pub criterion: Criterion,
    pub config: PruneConfig,
    pub layers: Vec<BaselineLayer>,
}

/// Restrict `conv` to the `survivors` input channels and refit it by least
/// squares so that it reproduces `targets` (pre-activation responses) from
/// `inputs` (full-channel layer inputs).
pub fn baseline_prune_layer(conv: &Conv, survivors: &[usize], inputs: &Tensor4, targets: &Tensor4) -> Result<Conv> {
    if survivors.is_empty() {
        return Err(invalid("empty survivor set"));
    }
    if let Some(&bad) = survivors.iter().find(|&&s| s >= conv.c_in) {
        return Err(invalid(format!("survivor {bad} out of range for {} inputs", conv.c_in)));
    }
    if inputs.c != conv.c_in || targets.c != conv.c_out || inputs.n != targets.n {
        return Err(invalid("inputs/targets do not match the layer"));
    }
    let x: FeatureMap<f32> = inputs.to_nhwc();
    let y: FeatureMap<f32> = targets.to_nhwc();
    Ok(refit(conv, &x.select_channels(survivors), &y, survivors)?.0)
}

/// Least-squares refit on inputs that already hold only the survivors.
fn refit(conv: &Conv, x: &FeatureMap<f32>, y: &FeatureMap<f32>, survivors: &[usize]) -> Result<(Conv, f64)> {
    let template = conv.select_inputs(survivors);
    let (cols, ho, wo) = im2col_nhwc(x, template.k, template.pad, template.stride)?;
    let rows = x.n * ho * wo;
    if y.positions() != rows || y.c != conv.c_out {
        return Err(invalid("target map does not match the layer output"));
    }
    let width = template.patch_len();
    let mut a = Vec::with_capacity(rows * (width + 1));
    for row in cols.chunks(width) {
        a.extend_from_slice(row);
        a.push(1.0);
    }
    let a = Matrix::new(rows, width + 1, a)?;
    let b = Matrix::new(rows, conv.c_out, y.data.clone())?;
    let sol = lstsq(&a, &b)?;
    let fitted = a.matmul(&sol)?;
    let residual = fitted.sub(&b)?.frobenius() / b.frobenius().max(f64::MIN_POSITIVE);
    let data = sol.data();
    let n = conv.c_out;
    let weight = data[..width * n].to_vec();
    let bias = data[width * n..].to_vec();
    let out = Conv::new(
        template.kind,
        template.k,
        template.pad,
        template.stride,
        template.c_in,
        n,
        weight,
        Some(bias),
        template.relu,
    )?;
    Ok((out, residual))
}

/// Conventional layer-by-layer pruning: select survivors of each layer's
/// outputs with `criterion`, drop them, and refit the next layer by least
/// squares to the original network's pre-activation responses. Every layer
/// after the first is refit, including the classifier.
pub fn baseline_prune_network(
    net: &Network,
    cfg: &PruneConfig,
    criterion: Criterion,
    data: &Dataset,
) -> Result<(Network, BaselineReport)> {
    if net.form == Form::Decomposed {
        return Err(invalid("baseline pruning expects a plain network"));
    }
    let [c, h, w] = net.input;
    if (data.images.c, data.images.h, data.images.w) != (c, h, w) || data.is_empty() {
        return Err(invalid("dataset does not match the network input"));
    }
    let teacher = fold_batchnorm(net)?;
    let mut student = teacher.clone();
    let lin: Vec<usize> = teacher
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind(), LayerKind::Conv2D | LayerKind::Dense))
        .map(|(i, _)| i)
        .collect();
    if lin.len() != teacher.linear_indices().len() {
        return Err(Error::UnsupportedStructure("baseline expects only Conv2D and Dense layers".into()));
    }
    if lin.is_empty() {
        return Err(invalid("network has no linear layers"));
    }
    for entry in &cfg.layers {
        if !lin.iter().any(|&i| teacher.layers[i].name == entry.name) {
            return Err(invalid(format!("configured layer '{}' is not in the network", entry.name)));
        }
    }
    if cfg.keep(&teacher.layers[*lin.last().unwrap()].name).is_some_and(|k| {
        k != teacher.layers[*lin.last().unwrap()].as_conv().unwrap().c_out
    }) {
        return Err(invalid("the classifier's outputs cannot be pruned"));
    }
    let x0: FeatureMap<f32> = data.images.to_nhwc();
    let mut s_in = run_range_chunked(&student, &x0, 0..lin[0])?;
    let mut t_in = s_in.clone();
    let mut s_out = FeatureMap::zeros(0, 0, 0, 0);
    let mut layers = Vec::new();
    let mut masks = std::collections::BTreeMap::new();

    for (j, &idx) in lin.iter().enumerate() {
        if j > 0 {
            let prev = lin[j - 1];
            let pconv = student.layers[prev].as_conv().expect("linear").clone();
            let pname = student.layers[prev].name.clone();
            let n_prev = pconv.c_out;
            let keep = cfg.keep(&pname).unwrap_or(n_prev);
            if keep == 0 || keep > n_prev {
                return Err(invalid(format!("keep {keep} outside [1, {n_prev}] for '{pname}'")));
            }
            let kept: Vec<usize> = if keep < n_prev {
                let acts = if criterion.needs_activations() {
                    let idx: Vec<usize> = (0..s_out.n.min(SCORE_SAMPLES)).collect();
                    let mut a = s_out.select_samples(&idx);
                    if matches!(student.layers.get(prev + 1).map(|l| &l.op), Some(LayerOp::Relu)) {
                        a = apply_layer(&LayerOp::Relu, &a)?;
                    }
                    Some(a.to_tensor())
                } else {
                    None
                };
                let scores = score_neurons(criterion, &pconv, acts.as_ref(), layer_seed(cfg.seed, j - 1))?;
                let mask = build_mask(&scores, keep)?;
                masks.insert(pname.clone(), mask.bits());
                mask.kept()
            } else {
                (0..n_prev).collect()
            };
            let pl = &mut student.layers[prev];
            *pl = crate::net::Layer::conv(pname, pconv.select_outputs(&kept));
            s_in = s_in.select_channels(&kept);

            let tconv = teacher.layers[idx].as_conv().expect("linear");
            let (targets, _) = conv_forward(tconv, &t_in, false)?;
            let sconv = student.layers[idx].as_conv().expect("linear").clone();
            let (fitted, residual) = refit(&sconv, &s_in, &targets, &kept)?;
            layers.push(BaselineLayer {
                layer: student.layers[idx].name.clone(),
                inputs: kept.len(),
                residual,
            });
            student.layers[idx] = crate::net::Layer::conv(student.layers[idx].name.clone(), fitted);
        }
        s_out = apply_layer(&student.layers[idx].op, &s_in)?;
        let t_out = apply_layer(&teacher.layers[idx].op, &t_in)?;
        if let Some(&next) = lin.get(j + 1) {
            s_in = run_range_chunked(&student, &s_out, idx + 1..next)?;
            t_in = run_range_chunked(&teacher, &t_out, idx + 1..next)?;
        }
    }
    let mut out = Network::new(student.name.clone(), student.input, student.layers)?;
    out.form = Form::Slim;
    out.masks = masks;
    out.meta = net.meta.clone();
    set_meta(
        &mut out,
        "prune",
        serde_json::json!({"method": "baseline", "seed": cfg.seed, "criterion": criterion, "config": cfg}),
    );
    Ok((
        out,
        BaselineReport {
            version: 1,
            method: "baseline".into(),
            seed: cfg.seed,
            criterion,
            config: cfg.clone(),
            layers,
        },
    ))
}
