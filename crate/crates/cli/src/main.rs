//! `ldrf` command-line front end.

use clap::{Args, Parser, Subcommand};
use ldrf_core::bench::{run_comparison, toy_network, train_toy, Comparison, ToyConfig};
use ldrf_core::data::{gen_synthetic, Dataset, SynthConfig};
use ldrf_core::decompose::{decompose_network, rank_report, search_energy, stored_ranks, DecomposeOptions};
use ldrf_core::metrics::{cost_report, evaluate, speedup, Scope};
use ldrf_core::net::train::{fit, TrainSettings};
use ldrf_core::net::{load_model, save_model, Network};
use ldrf_core::pruner::{Criterion, PruneConfig};
use ldrf_core::recompose::{recompose, verify_equivalence};
use ldrf_core::reconstruct::{baseline_prune_network, ldrf_prune_logged, PruneReport};
use ldrf_core::Error;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ldrf", version, about = "Neuron pruning by layer decomposition and recomposition")]
struct Cli {
    /// Single worker thread; identical inputs give bit-identical outputs.
    #[arg(long, global = true)]
    reproducible: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic image dataset.
    GenData(GenData),
    /// Train the toy CNN on a dataset.
    Train(Train),
    /// Report per-layer ranks and valid keep ranges.
    Analyze(Analyze),
    /// Factor every linear layer into an embedding and a transformation.
    Decompose(Decompose),
    /// Prune a decomposed network with embedding-space reconstruction.
    Prune(Prune),
    /// Prune a plain network layer by layer with least-squares refits.
    BaselinePrune(BaselinePrune),
    /// Merge factor pairs and strip pruned channels.
    Recompose(Recompose),
    /// Loss and accuracy of a model on a dataset.
    Eval(Eval),
    /// Paired comparison of both pruners on the toy benchmark.
    Compare(Compare),
    /// Multiply-accumulate counts and speed-up.
    Flops(Flops),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent draw from the same class prototypes.
    #[arg(long, default_value_t = 0)]
    stream: u64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    separation: Option<f32>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 64, 64])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 600)]
    iters: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f32,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct SearchArgs {
    /// Raise the energy until the decomposed network recovers the original
    /// validation accuracy.
    #[arg(long)]
    search_energy: bool,
    /// Validation set for the energy search.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Accuracy drop accepted by the energy search.
    #[arg(long, default_value_t = 0.01)]
    tol: f64,
    /// Fine-tune steps after decomposition.
    #[arg(long, default_value_t = 0)]
    finetune_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    finetune_lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Analyze {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.55)]
    energy: f64,
    /// Training data, needed only with --search-energy.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct Decompose {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.55)]
    energy: f64,
    #[arg(long)]
    out: PathBuf,
    /// Rank report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct Prune {
    /// Decomposed model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Prune configuration JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-layer loss report JSON, written even when a layer diverges.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BaselinePrune {
    /// Plain model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's criterion.
    #[arg(long)]
    criterion: Option<Criterion>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Recompose {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Check the slim model against the factored one on this dataset.
    #[arg(long)]
    verify_data: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Compare {
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.5)]
    keep_ratio: f64,
    /// Benchmark configuration JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV table, one row per seed and method.
    #[arg(long)]
    out: PathBuf,
    /// Full per-seed results.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct Flops {
    #[arg(long)]
    model: PathBuf,
    /// Reference model for the speed-up ratio.
    #[arg(long)]
    original: Option<PathBuf>,
    #[arg(long, default_value = "conv")]
    flops_scope: Scope,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

type Result<T> = std::result::Result<T, Error>;

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_json(path: Option<&Path>, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Add the schema version, seed and configuration to a JSON object.
fn stamp(body: impl Serialize, seed: u64, config: Value) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    if !v.is_object() {
        v = json!({ "result": v });
    }
    v["version"] = json!(1);
    v["seed"] = json!(seed);
    v["config"] = config;
    Ok(v)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn decompose_options(energy: f64, s: &SearchArgs) -> DecomposeOptions {
    DecomposeOptions {
        energy,
        finetune: (s.finetune_iters > 0).then_some(TrainSettings {
            lr: s.finetune_lr,
            iters: s.finetune_iters,
            seed: s.seed,
            ..TrainSettings::default()
        }),
        ..DecomposeOptions::default()
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: a.seed,
        stream: a.stream,
        samples: a.samples.unwrap_or(d.samples),
        classes: a.classes.unwrap_or(d.classes),
        channels: a.channels.unwrap_or(d.channels),
        size: a.size.unwrap_or(d.size),
        separation: a.separation.unwrap_or(d.separation),
        noise: a.noise.unwrap_or(d.noise),
        ..d
    };
    gen_synthetic(&cfg)?.save(&a.out)
}

fn train(a: Train) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let widths: [usize; 3] = a
        .widths
        .as_slice()
        .try_into()
        .map_err(|_| usage("--widths takes exactly three values"))?;
    let mut net = toy_network(a.seed, widths, data.classes)?;
    let settings = TrainSettings {
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        iters: a.iters,
        batch: a.batch,
        seed: a.seed,
    };
    fit(&mut net, &data.images, &data.labels, &settings)?;
    let (loss, accuracy) = evaluate(&net, &data)?;
    net.meta = json!({
        "train": {"seed": a.seed, "widths": widths, "settings": settings, "data": path_str(&a.data)},
    });
    save_model(&net, &a.out)?;
    eprintln!("trained: loss {loss:.4}, training accuracy {accuracy:.4}");
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    let net = load_model(&a.model)?;
    let config = json!({"model": path_str(&a.model), "energy": a.energy, "search_energy": a.search.search_energy});
    let value = if a.search.search_energy {
        let train = Dataset::load(a.data.as_ref().ok_or_else(|| usage("--search-energy needs --data"))?)?;
        let val = Dataset::load(a.search.val.as_ref().ok_or_else(|| usage("--search-energy needs --val"))?)?;
        let found = search_energy(&net, &train, &val, a.energy, a.search.tol, &decompose_options(a.energy, &a.search))?;
        let mut v = stamp(&found.report, a.search.seed, config)?;
        v["search"] = json!({
            "energy": found.energy,
            "accuracy": found.accuracy,
            "baseline_accuracy": found.baseline_accuracy,
            "recovered": found.recovered,
        });
        v
    } else {
        stamp(rank_report(&net, a.energy)?, a.search.seed, config)?
    };
    write_json(a.out.as_deref(), &value)
}

fn decompose(a: Decompose) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let opts = decompose_options(a.energy, &a.search);
    let mut config = json!({"model": path_str(&a.model), "data": path_str(&a.data), "options": opts});
    let (mut out, report) = if a.search.search_energy {
        let val = Dataset::load(a.search.val.as_ref().ok_or_else(|| usage("--search-energy needs --val"))?)?;
        let found = search_energy(&net, &data, &val, a.energy, a.search.tol, &opts)?;
        config["search"] = json!({"energy": found.energy, "accuracy": found.accuracy, "recovered": found.recovered});
        if !found.recovered {
            eprintln!("warning: no energy up to 0.9 recovered the original accuracy; using {}", found.energy);
        }
        (found.network, found.report)
    } else {
        decompose_network(&net, &data, &opts)?
    };
    out.meta["decompose"] = json!({"seed": a.search.seed, "config": config.clone()});
    save_model(&out, &a.out)?;
    if let Some(p) = &a.report {
        write_json(Some(p), &stamp(&report, a.search.seed, config)?)?;
    }
    Ok(())
}

fn prune(a: Prune) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let cfg: PruneConfig = read_json(&a.config)?;
    let ranks = stored_ranks(&net)?;
    let mut log = Vec::new();
    let result = ldrf_prune_logged(&net, &cfg, &ranks, &data, &mut log);
    if let Some(p) = &a.report {
        let report = PruneReport {
            version: 1,
            method: "ldrf".into(),
            seed: cfg.seed,
            config: cfg.clone(),
            layers: log,
        };
        let mut v = serde_json::to_value(&report)?;
        v["complete"] = json!(result.is_ok());
        write_json(Some(p), &v)?;
    }
    save_model(&result?, &a.out)
}

fn baseline_prune(a: BaselinePrune) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let cfg: PruneConfig = read_json(&a.config)?;
    let criterion = a.criterion.unwrap_or(cfg.criterion);
    let (out, report) = baseline_prune_network(&net, &cfg, criterion, &data)?;
    save_model(&out, &a.out)?;
    if let Some(p) = &a.report {
        write_json(Some(p), &serde_json::to_value(&report)?)?;
    }
    Ok(())
}

fn recompose_cmd(a: Recompose) -> Result<()> {
    let net = load_model(&a.model)?;
    let slim = recompose(&net)?;
    if let Some(p) = &a.verify_data {
        let data = Dataset::load(p)?;
        let eq = verify_equivalence(&net, &slim, &data.images, a.tol)?;
        eprintln!("max logit deviation {:.3e} (tolerance {:.1e})", eq.max_abs_dev, a.tol);
        if !eq.pass {
            return Err(Error::Invariant(format!(
                "slim model deviates by {:.3e}, above {:.1e}",
                eq.max_abs_dev, a.tol
            )));
        }
    }
    save_model(&slim, &a.out)
}

fn eval(a: Eval) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let (loss, accuracy) = evaluate(&net, &data)?;
    let seed = net.meta.pointer("/prune/seed").and_then(Value::as_u64).unwrap_or(0);
    let v = stamp(
        json!({"loss": loss, "accuracy": accuracy, "samples": data.len()}),
        seed,
        json!({"model": path_str(&a.model), "data": path_str(&a.data)}),
    )?;
    write_json(a.out.as_deref(), &v)
}

fn compare(a: Compare) -> Result<()> {
    let base: ToyConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ToyConfig::default(),
    };
    let mut rows: Vec<Comparison> = Vec::new();
    for &seed in &a.seeds {
        let cfg = ToyConfig {
            seed,
            keep_ratio: a.keep_ratio,
            ..base.clone()
        };
        let toy = train_toy(&cfg)?;
        let c = run_comparison(&toy, &cfg)?;
        eprintln!(
            "seed {seed}: original {:.4}, ldrf {:.4}, baseline {:.4} (pre-fine-tune accuracy)",
            c.original_acc, c.ldrf.pre_ft_acc, c.baseline.pre_ft_acc
        );
        rows.push(c);
    }
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| usage(e.to_string()))?;
    let header = [
        "seed", "method", "keep-ratio", "pre-ft-acc", "post-ft-acc", "pre-ft-loss", "post-ft-loss", "original-acc", "speedup",
    ];
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for c in &rows {
        for m in [&c.ldrf, &c.baseline] {
            w.write_record([
                c.seed.to_string(),
                m.method.clone(),
                m.keep_ratio.to_string(),
                m.pre_ft_acc.to_string(),
                m.post_ft_acc.to_string(),
                m.pre_ft_loss.to_string(),
                m.post_ft_loss.to_string(),
                c.original_acc.to_string(),
                m.speedup.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    if let Some(p) = &a.json {
        let config = serde_json::to_value(ToyConfig {
            keep_ratio: a.keep_ratio,
            ..base
        })?;
        let seeds = a.seeds.first().copied().unwrap_or(0);
        write_json(Some(p), &stamp(json!({"seeds": a.seeds, "results": rows}), seeds, config)?)?;
    }
    Ok(())
}

fn flops(a: Flops) -> Result<()> {
    let net = load_model(&a.model)?;
    let report = cost_report(&net, a.flops_scope)?;
    let mut v = stamp(&report, 0, json!({"model": path_str(&a.model), "flops_scope": a.flops_scope}))?;
    if let Some(orig) = &a.original {
        let original: Network = load_model(orig)?;
        v["speedup"] = json!(speedup(&original, &net, a.flops_scope)?);
        v["config"]["original"] = json!(path_str(orig));
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, report.to_csv())?;
    }
    write_json(a.out.as_deref(), &v)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Invariant(_) => 1,
        _ => 2,
    }
}

fn configure_threads(reproducible: bool) -> Result<()> {
    let threads = if reproducible {
        Some(1)
    } else {
        match std::env::var("LDRF_THREADS") {
            Ok(s) => Some(
                s.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| usage(format!("LDRF_THREADS must be a positive integer, got '{s}'")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invariant(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.reproducible)?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Decompose(a) => decompose(a),
        Command::Prune(a) => prune(a),
        Command::BaselinePrune(a) => baseline_prune(a),
        Command::Recompose(a) => recompose_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Flops(a) => flops(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
