//! Desk-scale benchmark: a small CNN on synthetic 16×16 four-class images,
//! pruned by both methods and compared before and after fine-tuning.

use crate::data::{gen_synthetic, Dataset, SynthConfig};
use crate::decompose::{decompose_network, DecomposeOptions, RankReport};
use crate::error::Result;
use crate::metrics::{evaluate, speedup, Scope};
use crate::net::train::{fit, TrainSettings};
use crate::net::{Conv, Layer, LayerOp, Network};
use crate::pruner::{Criterion, OptimSettings, PruneConfig};
use crate::recompose::recompose;
use crate::reconstruct::{baseline_prune_network, finetune, ldrf_prune_network, BaselineReport, PruneReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// conv 3→w1, pool, conv w1→w2, pool, conv w2→w3, dense 4·4·w3→classes,
/// softmax, with He-initialized weights and zero biases. Takes 3×16×16 inputs.
pub fn toy_network(seed: u64, widths: [usize; 3], classes: usize) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |fan_in: usize, len: usize| -> Vec<f32> {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        (0..len).map(|_| dist.sample(&mut rng) as f32).collect()
    };
    let [a, b, c] = widths;
    let conv = |cin: usize, n: usize, w: Vec<f32>| Conv::same(3, cin, n, w, Some(vec![0.0; n]), true);
    let layers = vec![
        Layer::conv("conv1", conv(3, a, he(27, 27 * a))?),
        Layer::new("pool1", LayerOp::MaxPool { k: 2, stride: 2 }),
        Layer::conv("conv2", conv(a, b, he(9 * a, 9 * a * b))?),
        Layer::new("pool2", LayerOp::MaxPool { k: 2, stride: 2 }),
        Layer::conv("conv3", conv(b, c, he(9 * b, 9 * b * c))?),
        Layer::conv(
            "fc",
            Conv::dense(4, c, classes, he(16 * c, 16 * c * classes), Some(vec![0.0; classes]), false)?,
        ),
        Layer::new("softmax", LayerOp::Softmax),
    ];
    Network::new("toy", [3, 16, 16], layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub widths: [usize; 3],
    pub train_samples: usize,
    pub test_samples: usize,
    pub train: TrainSettings,
    pub energy: f64,
    /// Short fine-tune of the decomposed network (`iters` 0 = none).
    pub decompose_finetune: TrainSettings,
    pub keep_ratio: f64,
    pub criterion: Criterion,
    pub baseline_criterion: Criterion,
    pub recon: OptimSettings,
    pub finetune: TrainSettings,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthConfig::default(),
            widths: [16, 64, 64],
            train_samples: 1024,
            test_samples: 1024,
            train: TrainSettings {
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
                iters: 600,
                batch: 32,
                seed: 0,
            },
            energy: 0.55,
            decompose_finetune: TrainSettings {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                iters: 300,
                batch: 32,
                seed: 0,
            },
            keep_ratio: 0.5,
            criterion: Criterion::Topk,
            baseline_criterion: Criterion::Topk,
            recon: OptimSettings {
                lr: 0.005,
                iters: 500,
                ..OptimSettings::default()
            },
            finetune: TrainSettings {
                lr: 0.005,
                momentum: 0.9,
                weight_decay: 0.0,
                iters: 100,
                batch: 32,
                seed: 0,
            },
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Train and test sets drawn from the same class prototypes.
pub fn toy_datasets(cfg: &ToyConfig) -> Result<(Dataset, Dataset)> {
    let base = SynthConfig {
        seed: cfg.seed,
        ..cfg.data.clone()
    };
    let train = gen_synthetic(&SynthConfig {
        stream: 0,
        samples: cfg.train_samples,
        ..base.clone()
    })?;
    let test = gen_synthetic(&SynthConfig {
        stream: 1,
        samples: cfg.test_samples,
        ..base
    })?;
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct TrainedToy {
    pub net: Network,
    pub train: Dataset,
    pub test: Dataset,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

pub fn train_toy(cfg: &ToyConfig) -> Result<TrainedToy> {
    let (train, test) = toy_datasets(cfg)?;
    let mut net = toy_network(cfg.seed, cfg.widths, cfg.data.classes)?;
    let settings = TrainSettings {
        seed: cfg.seed,
        ..cfg.train
    };
    fit(&mut net, &train.images, &train.labels, &settings)?;
    let (test_loss, test_accuracy) = evaluate(&net, &test)?;
    Ok(TrainedToy {
        net,
        train,
        test,
        test_loss,
        test_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub keep_ratio: f64,
    pub pre_ft_acc: f64,
    pub post_ft_acc: f64,
    pub pre_ft_loss: f64,
    pub post_ft_loss: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub original_acc: f64,
    pub original_loss: f64,
    pub decomposed_acc: f64,
    pub ranks: RankReport,
    pub ldrf: MethodResult,
    pub baseline: MethodResult,
    pub ldrf_report: PruneReport,
    pub baseline_report: BaselineReport,
}

/// Stage one on a trained toy network. Returns the decomposed network and
/// its rank report.
pub fn decompose_toy(toy: &TrainedToy, cfg: &ToyConfig) -> Result<(Network, RankReport)> {
    let finetune = (cfg.decompose_finetune.iters > 0).then(|| TrainSettings {
        seed: cfg.seed ^ 0xD1,
        ..cfg.decompose_finetune
    });
    decompose_network(
        &toy.net,
        &toy.train,
        &DecomposeOptions {
            energy: cfg.energy,
            finetune,
            ..DecomposeOptions::default()
        },
    )
}

/// Keep counts for `ratio`, raised where needed so every pruned layer keeps
/// more neurons than its rank.
pub fn keep_config(report: &RankReport, ratio: f64, criterion: Criterion, seed: u64, optim: OptimSettings) -> PruneConfig {
    let mut cfg = PruneConfig::uniform(report, ratio, criterion, seed);
    for entry in &mut cfg.layers {
        let rank = report.get(&entry.name).expect("layer from report");
        if entry.keep <= rank.z && entry.keep < rank.n {
            entry.keep = (rank.z + 1).min(rank.n);
        }
    }
    cfg.optim = optim;
    cfg
}

/// LDRF pruning of a decomposed toy network, recomposed to a slim network.
pub fn ldrf_toy(
    toy: &TrainedToy,
    decomposed: &Network,
    ranks: &RankReport,
    cfg: &PruneConfig,
) -> Result<(Network, PruneReport)> {
    let (pruned, report) = ldrf_prune_network(decomposed, cfg, ranks, &toy.train)?;
    Ok((recompose(&pruned)?, report))
}

fn finish(method: &str, toy: &TrainedToy, mut slim: Network, cfg: &ToyConfig) -> Result<MethodResult> {
    let (pre_ft_loss, pre_ft_acc) = evaluate(&slim, &toy.test)?;
    let speedup = speedup(&toy.net, &slim, Scope::Conv)?;
    finetune(
        &mut slim,
        &toy.train,
        &TrainSettings {
            seed: cfg.seed ^ 0xF7,
            ..cfg.finetune
        },
    )?;
    let (post_ft_loss, post_ft_acc) = evaluate(&slim, &toy.test)?;
    Ok(MethodResult {
        method: method.into(),
        keep_ratio: cfg.keep_ratio,
        pre_ft_acc,
        post_ft_acc,
        pre_ft_loss,
        post_ft_loss,
        speedup,
    })
}

/// Both pruners at the same keep counts on one trained toy network.
pub fn run_comparison(toy: &TrainedToy, cfg: &ToyConfig) -> Result<Comparison> {
    let (decomposed, ranks) = decompose_toy(toy, cfg)?;
    let (_, decomposed_acc) = evaluate(&decomposed, &toy.test)?;
    let prune_cfg = keep_config(&ranks, cfg.keep_ratio, cfg.criterion, cfg.seed, cfg.recon);
    let (ldrf_slim, ldrf_report) = ldrf_toy(toy, &decomposed, &ranks, &prune_cfg)?;
    let (base_slim, baseline_report) = baseline_prune_network(&toy.net, &prune_cfg, cfg.baseline_criterion, &toy.train)?;
    Ok(Comparison {
        seed: cfg.seed,
        original_acc: toy.test_accuracy,
        original_loss: toy.test_loss,
        decomposed_acc,
        ldrf: finish("ldrf", toy, ldrf_slim, cfg)?,
        baseline: finish("baseline", toy, base_slim, cfg)?,
        ranks,
        ldrf_report,
        baseline_report,
    })
}
