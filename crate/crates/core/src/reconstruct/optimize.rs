use super::objective::{full_loss, recon_grad, ClassifierProblem, ReconParams, ReconProblem};
use crate::error::{invalid, Error, Result};
use crate::pruner::OptimSettings;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Full-set evaluations per optimization run.
const EVALUATIONS: usize = 10;
/// Divergence: this many consecutive evaluations above `DIVERGENCE_FACTOR`
/// times the initial loss.
const DIVERGENCE_STREAK: usize = 3;
const DIVERGENCE_FACTOR: f64 = 10.0;
/// A mini-batch loss this many times the initial loss triggers a back-off
/// without waiting for the next evaluation.
const BATCH_BLOWUP: f64 = 100.0;
/// Most learning-rate halvings per run.
const MAX_BACKOFFS: u32 = 8;

#[derive(Debug, Clone)]
pub struct LayerFit {
    pub params: ReconParams,
    pub init_loss: f64,
    /// Best full-set loss seen; never above `init_loss`.
    pub final_loss: f64,
    pub iters: usize,
    /// Full-set loss at every evaluation.
    pub history: Vec<f64>,
}

/// Mini-batch momentum SGD with linear learning-rate decay. Keeps the best
/// evaluated parameters; an exploding loss restarts from them at half the
/// learning rate, a bounded number of times.
fn sgd(
    layer: &str,
    init: &ReconParams,
    samples: usize,
    settings: &OptimSettings,
    seed: u64,
    mut grad: impl FnMut(&ReconParams, &[usize]) -> Result<(f64, ReconParams)>,
    mut eval: impl FnMut(&ReconParams) -> Result<f64>,
) -> Result<LayerFit> {
    settings.validate()?;
    if samples == 0 {
        return Err(invalid("no samples to optimize on"));
    }
    let init_loss = eval(init)?;
    let steps = settings.steps(samples);
    let mut fit = LayerFit {
        params: init.clone(),
        init_loss,
        final_loss: init_loss,
        iters: 0,
        history: vec![init_loss],
    };
    if !init_loss.is_finite() {
        return Err(Error::Divergence {
            layer: layer.to_string(),
            loss: init_loss,
            initial: init_loss,
        });
    }
    if init_loss == 0.0 || steps == 0 || settings.lr == 0.0 {
        return Ok(fit);
    }
    let batch = settings.batch.min(samples);
    let every = (steps / EVALUATIONS).max(1);
    let mut params = init.clone();
    let mut velocity = init.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples).collect();
    let mut cursor = samples;
    let mut streak = 0;
    let mut scale = 1.0;
    let mut backoffs = 0;
    for t in 0..steps {
        if cursor + batch > samples {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (batch_loss, g) = grad(&params, &order[cursor..cursor + batch])?;
        cursor += batch;
        fit.iters = t + 1;
        if (!batch_loss.is_finite() || batch_loss > BATCH_BLOWUP * init_loss) && backoffs < MAX_BACKOFFS {
            params = fit.params.clone();
            velocity = init.zeros_like();
            scale *= 0.5;
            backoffs += 1;
            continue;
        }
        let lr = scale * settings.lr * (1.0 - t as f64 / steps as f64);
        for ((w, v), g) in params.parts_mut().into_iter().zip(velocity.parts_mut()).zip(g.parts()) {
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = settings.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        if (t + 1) % every == 0 || t + 1 == steps {
            let loss = eval(&params)?;
            fit.history.push(loss);
            if !loss.is_finite() || loss > DIVERGENCE_FACTOR * init_loss {
                streak += 1;
                if streak >= DIVERGENCE_STREAK {
                    return Err(Error::Divergence {
                        layer: layer.to_string(),
                        loss,
                        initial: init_loss,
                    });
                }
                if backoffs < MAX_BACKOFFS {
                    params = fit.params.clone();
                    velocity = init.zeros_like();
                    scale *= 0.5;
                    backoffs += 1;
                }
            } else {
                streak = 0;
            }
            if loss < fit.final_loss {
                fit.final_loss = loss;
                fit.params = params.clone();
            }
        }
    }
    Ok(fit)
}

/// Minimize the reconstruction loss of one unit starting from `init`.
pub fn optimize_layer(
    p: &ReconProblem,
    init: &ReconParams,
    settings: &OptimSettings,
    seed: u64,
    layer: &str,
) -> Result<LayerFit> {
    sgd(
        layer,
        init,
        p.samples(),
        settings,
        seed,
        |w, b| recon_grad(p, w, b),
        |w| full_loss(p, w),
    )
}

/// Train the final transformation factor against labels with softmax
/// cross-entropy. `init.q` and `init.q_bias` are ignored and must be empty.
pub fn train_final_layer(
    p: &ClassifierProblem,
    init: &ReconParams,
    settings: &OptimSettings,
    seed: u64,
    layer: &str,
) -> Result<LayerFit> {
    if !init.q.is_empty() || !init.q_bias.is_empty() {
        return Err(invalid("final layer training only updates the transformation factor"));
    }
    let all: Vec<usize> = (0..p.samples()).collect();
    sgd(
        layer,
        init,
        p.samples(),
        settings,
        seed,
        |w, b| {
            let (loss, g) = p.eval(w, b, true)?;
            Ok((loss, g.expect("gradient requested")))
        },
        |w| Ok(p.eval(w, &all, false)?.0),
    )
}
