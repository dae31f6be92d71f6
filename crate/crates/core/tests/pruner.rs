mod common;

use common::{seeded, tensor};
use ldrf_core::decompose::{LayerRank, RankReport};
use ldrf_core::net::Conv;
use ldrf_core::pruner::{
    build_mask, score_neurons, valid_range, validate_config, Criterion, LayerKeep, Mask, OptimSettings, PruneConfig,
};
use ldrf_core::{Error, Tensor4};
use proptest::prelude::*;

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn conv_with_l1(norms: &[f32]) -> Conv {
    // 1×1 conv from one input: each filter is a single weight.
    Conv::same(1, 1, norms.len(), norms.iter().enumerate().map(|(i, &v)| if i % 2 == 0 { v } else { -v }).collect(), None, true)
        .unwrap()
}

#[test]
fn weight_criterion_ranks_by_l1_norm() {
    let s = score_neurons(Criterion::Weight, &conv_with_l1(&[3.0, 1.0, 2.0]), None, 0).unwrap();
    assert_eq!(ranking(&s), vec![0, 2, 1]);
    assert_eq!(s, vec![3.0, 1.0, 2.0]);
}

#[test]
fn topk_keeps_the_leading_channels() {
    let s = score_neurons(Criterion::Topk, &conv_with_l1(&[1.0; 5]), None, 0).unwrap();
    assert_eq!(build_mask(&s, 3).unwrap().kept(), vec![0, 1, 2]);
}

#[test]
fn dead_channel_has_minimal_apoz_score() {
    let mut acts = tensor(1, 4, 3, 2, 2);
    for v in acts.data_mut() {
        *v = v.abs() + 0.1;
    }
    for b in 0..4 {
        for p in 0..4 {
            acts.set(b, 1, p / 2, p % 2, 0.0);
        }
    }
    acts.set(0, 2, 0, 0, 0.0);
    let s = score_neurons(Criterion::Apoz, &conv_with_l1(&[1.0; 3]), Some(&acts), 0).unwrap();
    assert_eq!(s[1], -1.0);
    assert!((s[2] + 1.0 / 16.0).abs() < 1e-12);
    assert_eq!(s[0], 0.0);
    assert_eq!(ranking(&s).last(), Some(&1));
}

#[test]
fn activation_criterion_is_mean_magnitude() {
    let acts = Tensor4::new(2, 2, 1, 1, vec![1.0, -4.0, 3.0, 0.0]).unwrap();
    let s = score_neurons(Criterion::Activation, &conv_with_l1(&[1.0; 2]), Some(&acts), 0).unwrap();
    assert_eq!(s, vec![2.0, 2.0]);
}

#[test]
fn random_criterion_is_seeded() {
    let conv = conv_with_l1(&[1.0; 16]);
    let a = score_neurons(Criterion::Random, &conv, None, 9).unwrap();
    assert_eq!(a, score_neurons(Criterion::Random, &conv, None, 9).unwrap());
    assert_ne!(a, score_neurons(Criterion::Random, &conv, None, 10).unwrap());
}

#[test]
fn data_criteria_need_activations() {
    let conv = conv_with_l1(&[1.0; 3]);
    for c in [Criterion::Apoz, Criterion::Activation] {
        assert!(matches!(score_neurons(c, &conv, None, 0), Err(Error::InvalidArgument(_))));
    }
    let wrong = tensor(0, 2, 4, 1, 1);
    assert!(score_neurons(Criterion::Activation, &conv, Some(&wrong), 0).is_err());
}

#[test]
fn masks_validate_input() {
    assert!(build_mask(&[1.0, 2.0], 0).is_err());
    assert!(build_mask(&[1.0, 2.0], 3).is_err());
    assert!(build_mask(&[1.0, f64::NAN], 1).is_err());
    assert!(Mask::from_bits(&[1, 2]).is_err());
    assert!(Mask::from_kept(3, &[3]).is_err());
    assert_eq!(Mask::from_bits(&[1, 0, 1]).unwrap().kept(), vec![0, 2]);
    // Ties go to the lower index.
    assert_eq!(build_mask(&[1.0, 1.0, 1.0], 2).unwrap().kept(), vec![0, 1]);
}

fn report(ranks: &[(usize, usize)]) -> RankReport {
    RankReport {
        version: 1,
        energy: 0.55,
        layers: ranks
            .iter()
            .enumerate()
            .map(|(i, &(z, n))| LayerRank {
                name: format!("l{i}"),
                singular_values: vec![],
                cum_energy: vec![],
                z,
                n,
                valid_range: [z, n],
            })
            .collect(),
    }
}

fn config(keeps: &[usize]) -> PruneConfig {
    PruneConfig {
        energy: 0.55,
        layers: keeps.iter().enumerate().map(|(i, &keep)| LayerKeep { name: format!("l{i}"), keep }).collect(),
        criterion: Criterion::Topk,
        optim: OptimSettings::default(),
        seed: 0,
    }
}

#[test]
fn validation_cites_the_valid_range() {
    let r = report(&[(6, 64), (18, 64), (3, 10)]);
    assert!(validate_config(&config(&[7, 64]), &r).is_empty());
    let v = validate_config(&config(&[6, 64]), &r);
    assert_eq!(v.len(), 1);
    assert!(v[0].message.contains("(6, 64]"), "{}", v[0].message);
    assert!(v[0].message.contains("(z_l, n_l]"));
    assert_eq!(validate_config(&config(&[7, 65]), &r).len(), 1);
    // The classifier can only be kept whole.
    assert_eq!(validate_config(&config(&[7, 64, 9]), &r).len(), 1);
    assert!(validate_config(&config(&[7, 64, 10]), &r).is_empty());
}

#[test]
fn full_rank_layer_is_kept_whole() {
    let r = report(&[(5, 5), (1, 3)]);
    assert!(validate_config(&config(&[5]), &r).is_empty());
    assert_eq!(validate_config(&config(&[4]), &r).len(), 1);
    assert_eq!(valid_range(5, 5).unwrap(), 5..=5);
}

#[test]
fn uniform_config_skips_the_classifier() {
    let r = report(&[(6, 64), (20, 64), (3, 10)]);
    let cfg = PruneConfig::uniform(&r, 0.5, Criterion::Weight, 4);
    assert_eq!(cfg.layers.iter().map(|l| l.keep).collect::<Vec<_>>(), vec![32, 32]);
    assert_eq!(cfg.seed, 4);
}

#[test]
fn config_json_round_trip() {
    let json = r#"{"energy": 0.55, "layers": [{"name": "conv1", "keep": 8}], "criterion": "apoz",
        "optim": {"lr": 0.01, "momentum": 0.9, "iters": 100, "batch": 16}, "seed": 3}"#;
    let cfg: PruneConfig = serde_json::from_str(json).unwrap();
    assert_eq!(cfg.criterion, Criterion::Apoz);
    assert_eq!(cfg.keep("conv1"), Some(8));
    let again: PruneConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(again, cfg);
    assert!("bogus".parse::<Criterion>().is_err());
}

proptest! {
    #[test]
    fn prop_mask_keeps_exactly_k_best(scores in proptest::collection::vec(-10.0f64..10.0, 1..40), frac in 0.0f64..1.0) {
        let n = scores.len();
        let k = ((n as f64 * frac) as usize).clamp(1, n);
        let m = build_mask(&scores, k).unwrap();
        prop_assert_eq!(m.count(), k);
        let worst_kept = m.kept().iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..n).filter(|&i| !m.is_kept(i)) {
            prop_assert!(scores[i] <= worst_kept);
        }
    }

    #[test]
    fn prop_range_accepts_exactly_valid_keeps(z in 0usize..30, extra in 0usize..30, k in 0usize..70) {
        let n = z + extra;
        prop_assume!(n > 0);
        let r = report(&[(z, n), (1, 2)]);
        let ok = validate_config(&config(&[k]), &r).is_empty();
        let range = valid_range(z, n).unwrap();
        prop_assert_eq!(ok, range.contains(&k));
        prop_assert_eq!(ok, k == n || (z < k && k <= n));
    }

    #[test]
    fn prop_scores_have_one_entry_per_neuron(seed in 0u64..200, n in 1usize..12) {
        let conv = Conv::same(3, 2, n, seeded(seed, 18 * n), None, true).unwrap();
        let acts = tensor(seed, 3, n, 2, 2);
        for c in Criterion::ALL {
            prop_assert_eq!(score_neurons(c, &conv, Some(&acts), seed).unwrap().len(), n);
        }
    }
}
