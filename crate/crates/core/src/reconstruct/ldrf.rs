use super::objective::{full_loss, ClassifierProblem, Glue, ReconParams, ReconProblem, UnitSpec};
use super::optimize::{optimize_layer, train_final_layer};
use crate::data::Dataset;
use crate::decompose::{base_name, factor_pairs, set_meta, RankReport};
use crate::error::{invalid, Error, Result};
use crate::net::{apply_layer, run_range_chunked, FeatureMap, Form, LayerKind, LayerOp, Network};
use crate::pruner::{build_mask, score_neurons, validate_config, Mask, PruneConfig};
use crate::recompose::recompose_layer;
use serde::{Deserialize, Serialize};

/// Samples used to score neurons for data-dependent criteria.
const SCORE_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub layer: String,
    pub k: usize,
    pub z: usize,
    pub init_loss: f64,
    pub final_loss: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub version: u32,
    pub method: String,
    pub seed: u64,
    pub config: PruneConfig,
    pub layers: Vec<LayerLoss>,
}

pub(crate) fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Prune a decomposed network layer by layer, compensating each layer's loss
/// in the next layer's embedding space. Returns the pruned decomposed network
/// (masked channels zeroed, masks recorded) and the per-layer losses.
pub fn ldrf_prune_network(
    net: &Network,
    cfg: &PruneConfig,
    report: &RankReport,
    data: &Dataset,
) -> Result<(Network, PruneReport)> {
    let mut log = Vec::new();
    let out = ldrf_prune_logged(net, cfg, report, data, &mut log)?;
    Ok((
        out,
        PruneReport {
            version: 1,
            method: "ldrf".into(),
            seed: cfg.seed,
            config: cfg.clone(),
            layers: log,
        },
    ))
}

/// As [`ldrf_prune_network`], appending each finished layer to `log` so a
/// partial report survives an error.
pub fn ldrf_prune_logged(
    net: &Network,
    cfg: &PruneConfig,
    report: &RankReport,
    data: &Dataset,
    log: &mut Vec<LayerLoss>,
) -> Result<Network> {
    if net.form != Form::Decomposed {
        return Err(invalid("pruning expects a decomposed network"));
    }
    let violations = validate_config(cfg, report);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.message.clone()).collect();
        return Err(invalid(msgs.join("; ")));
    }
    cfg.optim.validate()?;
    let [c, h, w] = net.input;
    if (data.images.c, data.images.h, data.images.w) != (c, h, w) || data.is_empty() {
        return Err(invalid("dataset does not match the network input"));
    }
    let pairs = factor_pairs(net);
    if pairs.is_empty() {
        return Err(invalid("network has no factor pairs"));
    }
    for entry in &cfg.layers {
        if !pairs.iter().any(|&(q, _)| base_name(&net.layers[q].name) == entry.name) {
            return Err(invalid(format!("configured layer '{}' is not in the network", entry.name)));
        }
    }
    let rank = |name: &str| -> Result<usize> {
        report
            .get(name)
            .map(|r| r.z)
            .ok_or_else(|| invalid(format!("rank report has no entry for '{name}'")))
    };
    let teacher = net;
    let mut student = net.clone();
    let x0: FeatureMap<f32> = data.images.to_nhwc();
    let mut s_cur = run_range_chunked(&student, &x0, 0..pairs[0].0 + 1)?;
    let mut t_cur = s_cur.clone();
    let mut pruned_any = false;

    for l in 0..pairs.len() - 1 {
        let (ql, rl) = pairs[l];
        let (qn, _) = pairs[l + 1];
        let name = base_name(&student.layers[rl].name).to_string();
        let r_conv = student.layers[rl].as_conv().expect("factor").clone();
        let n = r_conv.c_out;
        let keep = cfg.keep(&name).unwrap_or(n);
        let z = rank(&name)?;

        t_cur = run_range_chunked(teacher, &t_cur, ql + 1..qn + 1)?;

        let glue = glue_ops(&student, rl + 1..qn)?;
        let mask = if keep == n {
            Mask::full(n)
        } else {
            let acts = if cfg.criterion.needs_activations() {
                let idx: Vec<usize> = (0..s_cur.n.min(SCORE_SAMPLES)).collect();
                let mut a = apply_layer(&student.layers[rl].op, &s_cur.select_samples(&idx))?;
                if glue.first() == Some(&Glue::Relu) {
                    a = apply_layer(&LayerOp::Relu, &a)?;
                }
                Some(a.to_tensor())
            } else {
                None
            };
            let q_conv = student.layers[ql].as_conv().expect("factor");
            let merged = recompose_layer(q_conv, &r_conv, LayerKind::Conv2D)?;
            let scores = score_neurons(cfg.criterion, &merged, acts.as_ref(), layer_seed(cfg.seed, l))?;
            build_mask(&scores, keep)?
        };
        pruned_any |= !mask.is_full();

        let q_next = student.layers[qn].as_conv().expect("factor").clone();
        let spec = UnitSpec {
            n,
            relu: r_conv.relu,
            glue,
            k: q_next.k,
            pad: q_next.pad,
            stride: q_next.stride,
        };
        let problem = ReconProblem::from_maps(s_cur.cast(), t_cur.cast(), spec, mask.clone())?;
        let init = ReconParams {
            r: to_f64(&r_conv.weight),
            r_bias: to_f64(&r_conv.bias_or_zero()),
            q: to_f64(&q_next.weight),
            q_bias: to_f64(&q_next.bias_or_zero()),
        };
        // Start from the least-squares embedding factor when it fits better.
        let init = if mask.is_full() {
            init
        } else {
            let refit = problem.refit_embedding(&init)?;
            if full_loss(&problem, &refit)? < full_loss(&problem, &init)? {
                refit
            } else {
                init
            }
        };
        let fit = optimize_layer(&problem, &init, &cfg.optim, layer_seed(cfg.seed ^ 0x5EED, l), &name)?;

        let mut r_w = to_f32(&fit.params.r);
        let mut r_b = to_f32(&fit.params.r_bias);
        for j in (0..n).filter(|&j| !mask.is_kept(j)) {
            for row in r_w.chunks_mut(n) {
                row[j] = 0.0;
            }
            r_b[j] = 0.0;
        }
        {
            let conv = student.layers[rl].as_conv_mut().expect("factor");
            conv.weight = r_w;
            conv.bias = Some(r_b);
        }
        {
            let conv = student.layers[qn].as_conv_mut().expect("factor");
            conv.weight = to_f32(&fit.params.q);
            conv.bias = Some(to_f32(&fit.params.q_bias));
        }
        if !mask.is_full() {
            student.masks.insert(name.clone(), mask.bits());
        }
        log.push(LayerLoss {
            layer: name,
            k: keep,
            z,
            init_loss: fit.init_loss,
            final_loss: fit.final_loss,
            iters: fit.iters,
        });
        s_cur = run_range_chunked(&student, &s_cur, ql + 1..qn + 1)?;
    }

    // Final transformation factor against labels.
    let (_, rl) = *pairs.last().expect("non-empty");
    for layer in &student.layers[rl + 1..] {
        if !matches!(layer.op, LayerOp::Softmax) {
            return Err(Error::UnsupportedStructure(format!(
                "layer '{}' follows the classifier",
                layer.name
            )));
        }
    }
    let name = base_name(&student.layers[rl].name).to_string();
    let r_conv = student.layers[rl].as_conv().expect("factor").clone();
    if s_cur.h != 1 || s_cur.w != 1 {
        return Err(Error::UnsupportedStructure(format!(
            "classifier '{name}' input must be 1x1 spatially, got {}x{}",
            s_cur.h, s_cur.w
        )));
    }
    let inputs: Vec<f64> = s_cur.data.iter().map(|&v| v as f64).collect();
    let problem = ClassifierProblem::new(&inputs, r_conv.c_in, r_conv.c_out, &data.labels, r_conv.relu)?;
    let init = ReconParams {
        r: to_f64(&r_conv.weight),
        r_bias: to_f64(&r_conv.bias_or_zero()),
        q: Vec::new(),
        q_bias: Vec::new(),
    };
    let mut settings = cfg.optim;
    if !pruned_any {
        // Nothing upstream changed; the classifier input is the original one.
        settings.iters = 0;
        settings.lr = 0.0;
    }
    let fit = train_final_layer(&problem, &init, &settings, layer_seed(cfg.seed ^ 0xF1A1, pairs.len()), &name)?;
    {
        let conv = student.layers[rl].as_conv_mut().expect("factor");
        conv.weight = to_f32(&fit.params.r);
        conv.bias = Some(to_f32(&fit.params.r_bias));
    }
    log.push(LayerLoss {
        layer: name.clone(),
        k: r_conv.c_out,
        z: rank(&name)?,
        init_loss: fit.init_loss,
        final_loss: fit.final_loss,
        iters: fit.iters,
    });
    set_meta(
        &mut student,
        "prune",
        serde_json::json!({"method": "ldrf", "seed": cfg.seed, "config": cfg}),
    );
    Ok(student)
}

/// Parameter-free layers between two factors.
pub(crate) fn glue_ops(net: &Network, range: std::ops::Range<usize>) -> Result<Vec<Glue>> {
    net.layers[range]
        .iter()
        .map(|l| match l.op {
            LayerOp::MaxPool { k, stride } => Ok(Glue::MaxPool { k, stride }),
            LayerOp::Relu => Ok(Glue::Relu),
            _ => Err(Error::UnsupportedStructure(format!(
                "layer '{}' between factors is not a pool or ReLU",
                l.name
            ))),
        })
        .collect()
}
