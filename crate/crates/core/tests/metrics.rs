use ldrf_core::data::{Dataset, SynthConfig, gen_synthetic};
use ldrf_core::metrics::{chain, cost_report, evaluate, layer_macs, sparsity_report, speedup, vgg9, Scope};
use ldrf_core::net::{Conv, Layer, LayerKind, LayerOp, Network};
use ldrf_core::Tensor4;
use proptest::prelude::*;

const ORIGINAL: [usize; 6] = [64, 64, 128, 128, 256, 256];

/// Keep counts and printed sparsity percentages for the 2×, 3×, 4× and 5×
/// VGG-9 settings.
const SETTINGS: [(f64, [usize; 6], [f64; 6]); 4] = [
    (2.0, [12, 36, 74, 98, 236, 256], [81.3, 89.5, 67.5, 55.7, 29.4, 7.8]),
    (3.0, [6, 18, 65, 98, 178, 206], [90.6, 97.4, 85.7, 61.1, 46.8, 44.0]),
    (4.0, [6, 18, 37, 69, 178, 206], [90.6, 97.4, 91.9, 84.4, 62.5, 44.0]),
    (5.0, [6, 18, 37, 49, 152, 206], [90.6, 97.4, 91.9, 88.9, 77.3, 52.2]),
];

#[test]
fn vgg9_sparsity_cells() {
    let original = chain(3, &ORIGINAL);
    for (label, keep, printed) in SETTINGS {
        let report = sparsity_report(&original, &chain(3, &keep)).unwrap();
        for (cell, want) in report.iter().zip(printed) {
            assert!((cell.sparsity * 100.0 - want).abs() <= 0.1, "{label}x: {} vs {want}", cell.sparsity * 100.0);
        }
    }
}

#[test]
fn vgg9_speedups_near_labels() {
    let base = vgg9(ORIGINAL).unwrap();
    for (label, keep, _) in SETTINGS {
        let s = speedup(&base, &vgg9(keep).unwrap(), Scope::Conv).unwrap();
        assert!((s / label - 1.0).abs() <= 0.15, "{label}x setting gives {s}");
    }
}

#[test]
fn vgg9_first_layer_cost() {
    let r = cost_report(&vgg9(ORIGINAL).unwrap(), Scope::Conv).unwrap();
    assert_eq!(r.layers[0].macs, 9 * 3 * 64 * 1024);
    assert_eq!(r.total, r.layers.iter().map(|l| l.macs).sum::<u64>());
    assert_eq!(r.layers.len(), 6);
    let all = cost_report(&vgg9(ORIGINAL).unwrap(), Scope::All).unwrap();
    assert_eq!(all.layers.len(), 9);
    assert_eq!(all.layers[6].macs, 4 * 4 * 256 * 512);
    assert!(all.to_csv().lines().count() >= 10);
}

fn chain_net(widths: &[usize]) -> Network {
    let mut c = 3;
    let layers = widths
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let l = Layer::conv(format!("c{i}"), Conv::same(3, c, n, vec![0.0; 9 * c * n], None, true).unwrap());
            c = n;
            l
        })
        .collect();
    Network::new("chain", [3, 8, 8], layers).unwrap()
}

#[test]
fn speedup_identity_and_halving() {
    let full = chain_net(&[3, 16, 16, 16]);
    assert_eq!(speedup(&full, &full, Scope::All).unwrap(), 1.0);
    // Input channels of the first layer stay, so the first layer only halves.
    let half = chain_net(&[3, 8, 8, 8]);
    let s = speedup(&full, &half, Scope::All).unwrap();
    let want = (27.0 * 3.0 + 9.0 * (3.0 * 16.0 + 2.0 * 256.0)) / (27.0 * 3.0 + 9.0 * (3.0 * 8.0 + 2.0 * 64.0));
    assert!((s - want).abs() < 1e-12);
    assert!(s > 3.5 && s < 4.0);
}

#[test]
fn decomposed_pair_is_cheaper_below_threshold() {
    let (k, c, n, hw) = (3usize, 16usize, 32usize, 8usize);
    let plain = Layer::conv("w", Conv::same(k, c, n, vec![0.0; k * k * c * n], None, true).unwrap());
    let plain_cost = layer_macs(&plain, [c, hw, hw]);
    let threshold = (k * k * c * n) as f64 / (k * k * c + n) as f64;
    for z in 1..n {
        let q = Layer::conv("q", Conv::new(LayerKind::EmbedConv, k, 1, 1, c, z, vec![0.0; k * k * c * z], None, false).unwrap());
        let r = Layer::conv("r", Conv::new(LayerKind::PointwiseConv, 1, 0, 1, z, n, vec![0.0; z * n], None, true).unwrap());
        let pair = layer_macs(&q, [c, hw, hw]) + layer_macs(&r, [z, hw, hw]);
        assert_eq!(pair < plain_cost, (z as f64) < threshold, "z = {z}");
    }
}

#[test]
fn pool_and_relu_cost_nothing() {
    assert_eq!(layer_macs(&Layer::new("p", LayerOp::MaxPool { k: 2, stride: 2 }), [4, 8, 8]), 0);
    assert_eq!(layer_macs(&Layer::new("r", LayerOp::Relu), [4, 8, 8]), 0);
}

fn constant_net(classes: usize) -> Network {
    let fc = Conv::dense(4, 3, classes, vec![0.0; 48 * classes], Some(vec![0.5; classes]), false).unwrap();
    Network::new("const", [3, 4, 4], vec![Layer::conv("fc", fc), Layer::new("sm", LayerOp::Softmax)]).unwrap()
}

fn balanced(classes: usize, per: usize) -> Dataset {
    let n = classes * per;
    let labels = (0..n).map(|i| (i % classes) as u32).collect();
    Dataset::new(Tensor4::zeros(n, 3, 4, 4), labels, classes).unwrap()
}

#[test]
fn constant_logits_give_chance_and_log_classes() {
    for classes in [2, 4, 10] {
        let (loss, acc) = evaluate(&constant_net(classes), &balanced(classes, 5)).unwrap();
        assert!((loss - (classes as f64).ln()).abs() < 1e-6);
        // Ties resolve to class 0, which is one class in `classes`.
        assert!((acc - 1.0 / classes as f64).abs() < 1e-12);
    }
}

#[test]
fn evaluate_rejects_bad_datasets() {
    let empty = Dataset::new(Tensor4::zeros(0, 3, 4, 4), vec![], 4).unwrap();
    assert!(evaluate(&constant_net(4), &empty).is_err());
    assert!(evaluate(&constant_net(4), &balanced(3, 2)).is_err());
}

#[test]
fn synthetic_data_is_balanced() {
    let d = gen_synthetic(&SynthConfig { samples: 100, ..SynthConfig::default() }).unwrap();
    assert_eq!(d.class_histogram(), vec![25; 4]);
}

proptest! {
    #[test]
    fn prop_macs_multiplicative(c in 1usize..8, n in 1usize..8, a in 1usize..4, hw in 2usize..9) {
        let macs = |c: usize, n: usize| {
            layer_macs(&Layer::conv("c", Conv::same(3, c, n, vec![0.0; 9 * c * n], None, true).unwrap()), [c, hw, hw])
        };
        prop_assert_eq!(macs(a * c, n), a as u64 * macs(c, n));
        prop_assert_eq!(macs(c, a * n), a as u64 * macs(c, n));
    }

    #[test]
    fn prop_pruning_never_slows_down(w in proptest::collection::vec(1usize..12, 4), cut in proptest::collection::vec(0usize..12, 4)) {
        let pruned: Vec<usize> = w.iter().zip(&cut).map(|(&a, &b)| a.saturating_sub(b).max(1)).collect();
        let s = speedup(&chain_net(&w), &chain_net(&pruned), Scope::Conv).unwrap();
        prop_assert!(s >= 1.0);
        let rep = sparsity_report(&chain(3, &w), &chain(3, &pruned)).unwrap();
        prop_assert!(rep.iter().all(|l| (0.0..=1.0).contains(&l.sparsity)));
    }
}
