use ldrf_core::bench::{keep_config, toy_network};
use ldrf_core::data::{gen_synthetic, Dataset, SynthConfig};
use ldrf_core::decompose::{decompose_network, DecomposeOptions, RankReport};
use ldrf_core::metrics::evaluate;
use ldrf_core::net::{load_model, predict, save_model, Network};
use ldrf_core::pruner::{Criterion, OptimSettings, PruneConfig};
use ldrf_core::recompose::recompose;
use ldrf_core::reconstruct::ldrf_prune_network;
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn ldrf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldrf"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ldrf(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

struct Fixture {
    dir: TempDir,
    data: Dataset,
    decomposed: Network,
    ranks: RankReport,
}

/// Untrained toy network decomposed at e = 0.6, saved as `dec.ldrf` next to
/// `data.ldds`.
fn fixture(seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&SynthConfig {
        seed,
        samples: 96,
        ..SynthConfig::default()
    })
    .unwrap();
    let net = toy_network(seed, [8, 16, 16], 4).unwrap();
    let opts = DecomposeOptions {
        energy: 0.6,
        ..DecomposeOptions::default()
    };
    let (decomposed, ranks) = decompose_network(&net, &data, &opts).unwrap();
    save_model(&net, dir.path().join("plain.ldrf")).unwrap();
    save_model(&decomposed, dir.path().join("dec.ldrf")).unwrap();
    data.save(dir.path().join("data.ldds")).unwrap();
    Fixture {
        dir,
        data,
        decomposed,
        ranks,
    }
}

fn write_config(dir: &Path, cfg: &PruneConfig) {
    std::fs::write(dir.join("cfg.json"), serde_json::to_string(cfg).unwrap()).unwrap();
}

fn short_optim() -> OptimSettings {
    OptimSettings {
        iters: 30,
        ..OptimSettings::default()
    }
}

const PRUNE: [&str; 9] = ["prune", "--model", "dec.ldrf", "--data", "data.ldds", "--config", "cfg.json", "--out", "pruned.ldrf"];

#[test]
fn keep_at_rank_exits_2_citing_the_range() {
    let f = fixture(1);
    let mut cfg = keep_config(&f.ranks, 0.5, Criterion::Topk, 0, short_optim());
    let z = f.ranks.get("conv2").unwrap().z;
    let n = f.ranks.get("conv2").unwrap().n;
    cfg.layers.iter_mut().find(|l| l.name == "conv2").unwrap().keep = z;
    write_config(f.dir.path(), &cfg);
    let out = ldrf(f.dir.path(), &PRUNE);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(2), "{stderr}");
    assert!(stderr.contains("(z_l, n_l]") && stderr.contains(&format!("({z}, {n}]")), "{stderr}");
    assert!(!f.dir.path().join("pruned.ldrf").exists());
}

#[test]
fn divergence_exits_3_and_keeps_a_partial_report() {
    let f = fixture(2);
    let optim = OptimSettings {
        lr: 1e6,
        iters: 60,
        ..OptimSettings::default()
    };
    write_config(f.dir.path(), &keep_config(&f.ranks, 0.5, Criterion::Topk, 0, optim));
    let mut args = PRUNE.to_vec();
    args.extend(["--report", "partial.json"]);
    let out = ldrf(f.dir.path(), &args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{stderr}");
    assert!(stderr.contains("conv1"), "{stderr}");
    let report = read_json(f.dir.path().join("partial.json"));
    assert_eq!(report["complete"], false);
    assert_eq!(report["version"], 1);
}

#[test]
fn usage_and_format_errors_exit_2() {
    let f = fixture(3);
    let dir = f.dir.path();
    assert_eq!(ldrf(dir, &["eval", "--model", "missing.ldrf", "--data", "data.ldds"]).status.code(), Some(2));
    assert_eq!(ldrf(dir, &["eval", "--model", "data.ldds", "--data", "data.ldds"]).status.code(), Some(2));
    assert_eq!(ldrf(dir, &["prune", "--bogus"]).status.code(), Some(2));
    assert_eq!(ldrf(dir, &["flops", "--model", "dec.ldrf", "--flops-scope", "everything"]).status.code(), Some(2));
    // Pruning needs a decomposed model.
    write_config(dir, &keep_config(&f.ranks, 0.5, Criterion::Topk, 0, short_optim()));
    let mut args = PRUNE.to_vec();
    args[2] = "plain.ldrf";
    let out = ldrf(dir, &args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_ldrf"))
        .args(["eval", "--model", "dec.ldrf", "--data", "data.ldds"])
        .env("LDRF_THREADS", "zero")
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
}

#[test]
fn analyze_reports_ranks_with_version() {
    let f = fixture(4);
    ok(f.dir.path(), &["analyze", "--model", "plain.ldrf", "--energy", "0.6", "--out", "a.json"]);
    let a = read_json(f.dir.path().join("a.json"));
    assert_eq!(a["version"], 1);
    assert_eq!(a["config"]["energy"], 0.6);
    let layers = a["layers"].as_array().unwrap();
    assert_eq!(layers.len(), f.ranks.layers.len());
    for (got, want) in layers.iter().zip(&f.ranks.layers) {
        assert_eq!(got["z"], want.z);
        assert_eq!(got["n"], want.n);
    }
    // Printed to stdout without --out.
    let out = ok(f.dir.path(), &["analyze", "--model", "plain.ldrf"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["energy"], 0.55);
}

#[test]
fn cli_pipeline_matches_in_memory_pipeline() {
    let f = fixture(5);
    let dir = f.dir.path();
    let cfg = keep_config(&f.ranks, 0.5, Criterion::Weight, 7, short_optim());
    write_config(dir, &cfg);
    let mut args = PRUNE.to_vec();
    args.extend(["--report", "prune.json"]);
    ok(dir, &args);
    ok(dir, &["recompose", "--model", "pruned.ldrf", "--out", "slim.ldrf", "--verify-data", "data.ldds"]);
    ok(dir, &["eval", "--model", "slim.ldrf", "--data", "data.ldds", "--out", "eval.json"]);

    let (pruned, _) = ldrf_prune_network(&f.decomposed, &cfg, &f.ranks, &f.data).unwrap();
    let slim = recompose(&pruned).unwrap();
    let from_cli = load_model(dir.join("slim.ldrf")).unwrap();
    let dev = predict(&slim, &f.data.images)
        .unwrap()
        .max_abs_diff(&predict(&from_cli, &f.data.images).unwrap());
    assert!(dev <= 1e-5, "{dev}");
    let (loss, acc) = evaluate(&slim, &f.data).unwrap();
    let e = read_json(dir.join("eval.json"));
    assert!((e["loss"].as_f64().unwrap() - loss).abs() <= 1e-5);
    assert!((e["accuracy"].as_f64().unwrap() - acc).abs() <= 1e-12);
    assert_eq!(e["seed"], 7);
    let report = read_json(dir.join("prune.json"));
    assert_eq!(report["complete"], true);
    assert_eq!(report["layers"].as_array().unwrap().len(), f.ranks.layers.len());
}

#[test]
fn baseline_and_flops_outputs() {
    let f = fixture(6);
    let dir = f.dir.path();
    write_config(dir, &keep_config(&f.ranks, 0.5, Criterion::Topk, 0, short_optim()));
    ok(dir, &["baseline-prune", "--model", "plain.ldrf", "--data", "data.ldds", "--config", "cfg.json", "--out", "base.ldrf", "--report", "base.json"]);
    let report = read_json(dir.join("base.json"));
    assert_eq!(report["method"], "baseline");
    ok(dir, &["flops", "--model", "base.ldrf", "--original", "plain.ldrf", "--out", "flops.json", "--csv", "flops.csv"]);
    let flops = read_json(dir.join("flops.json"));
    assert!(flops["speedup"].as_f64().unwrap() > 1.0);
    assert_eq!(flops["version"], 1);
    assert!(std::fs::read_to_string(dir.join("flops.csv")).unwrap().lines().count() >= 4);
}

#[test]
fn compare_writes_the_method_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"widths":[4,8,8],"train_samples":128,"test_samples":64,"energy":0.5,
        "train":{"iters":20},"decompose_finetune":{"iters":0},"recon":{"iters":10},"finetune":{"iters":5}}"#;
    std::fs::write(dir.path().join("toy.json"), cfg).unwrap();
    ok(dir.path(), &["compare", "--seeds", "0,1", "--config", "toy.json", "--out", "cmp.csv", "--json", "cmp.json"]);
    let mut reader = csv::Reader::from_path(dir.path().join("cmp.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    for col in ["method", "keep-ratio", "pre-ft-acc", "post-ft-acc"] {
        assert!(header.iter().any(|h| h == col), "{header:?}");
    }
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let methods: Vec<&str> = rows.iter().map(|r| &r[1]).collect();
    assert_eq!(methods, ["ldrf", "baseline", "ldrf", "baseline"]);
    let j = read_json(dir.path().join("cmp.json"));
    assert_eq!(j["version"], 1);
    assert_eq!(j["results"].as_array().unwrap().len(), 2);
}

#[test]
fn gen_data_and_train_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "d.ldds", "--seed", "9", "--samples", "64", "--classes", "3"]);
    let data = Dataset::load(d.join("d.ldds")).unwrap();
    assert_eq!((data.len(), data.classes), (64, 3));
    ok(d, &["train", "--data", "d.ldds", "--out", "m.ldrf", "--widths", "4,4,4", "--iters", "5"]);
    let m = load_model(d.join("m.ldrf")).unwrap();
    assert_eq!(m.meta["train"]["widths"], serde_json::json!([4, 4, 4]));
    assert_eq!(ldrf(d, &["train", "--data", "d.ldds", "--out", "x.ldrf", "--widths", "4,4"]).status.code(), Some(2));
}
