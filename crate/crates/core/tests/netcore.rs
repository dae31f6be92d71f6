mod common;

use common::{seeded, tensor};
use ldrf_core::net::{
    fold_batchnorm, forward, im2col, load_model, model_from_bytes, model_to_bytes, predict, save_model, BatchNorm,
    Conv, Layer, LayerOp, Network, Tensor4,
};
use ldrf_core::Error;
use proptest::prelude::*;

/// Direct nested-loop convolution, weight rows ordered (ky, kx, c).
fn naive_conv(x: &Tensor4, conv: &Conv) -> Vec<f64> {
    let (k, pad, s) = (conv.k as isize, conv.pad as isize, conv.stride as isize);
    let ho = ((x.h as isize + 2 * pad - k) / s + 1) as usize;
    let wo = ((x.w as isize + 2 * pad - k) / s + 1) as usize;
    let bias = conv.bias_or_zero();
    let mut out = vec![0.0; x.n * conv.c_out * ho * wo];
    for b in 0..x.n {
        for o in 0..conv.c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias[o] as f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = i as isize * s + ky - pad;
                            let xx = j as isize * s + kx - pad;
                            if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                continue;
                            }
                            for c in 0..x.c {
                                let row = ((ky * k + kx) as usize) * x.c + c;
                                acc += x.get(b, c, y as usize, xx as usize) as f64
                                    * conv.weight[row * conv.c_out + o] as f64;
                            }
                        }
                    }
                    if conv.relu {
                        acc = acc.max(0.0);
                    }
                    out[((b * conv.c_out + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

fn single(conv: Conv, input: [usize; 3]) -> Network {
    Network::new("one", input, vec![Layer::conv("c", conv)]).unwrap()
}

#[test]
fn im2col_pointwise_lists_channel_vectors() {
    let x = Tensor4::new(1, 2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let m = im2col(&x, 1, 0, 1).unwrap();
    assert_eq!((m.rows(), m.cols()), (4, 2));
    assert_eq!(m.data(), &[1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]);
}

#[test]
fn im2col_padded_patches_by_hand() {
    let x = Tensor4::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let m = im2col(&x, 3, 1, 1).unwrap();
    assert_eq!((m.rows(), m.cols()), (4, 9));
    let expect: [[f32; 9]; 4] = [
        [0., 0., 0., 0., 1., 2., 0., 3., 4.],
        [0., 0., 0., 1., 2., 0., 3., 4., 0.],
        [0., 1., 2., 0., 3., 4., 0., 0., 0.],
        [1., 2., 0., 3., 4., 0., 0., 0., 0.],
    ];
    for (r, row) in expect.iter().enumerate() {
        assert_eq!(m.row(r), row, "row {r}");
    }
}

#[test]
fn im2col_rejects_oversized_kernel() {
    let x = tensor(1, 1, 1, 2, 2);
    assert!(matches!(im2col(&x, 5, 0, 1), Err(Error::InvalidArgument(_))));
}

#[test]
fn conv_matches_naive_oracle() {
    let x = tensor(7, 2, 3, 5, 5);
    for (k, pad, stride) in [(3, 1, 1), (3, 0, 2), (1, 0, 1)] {
        let conv = Conv::new(
            ldrf_core::net::LayerKind::Conv2D,
            k,
            pad,
            stride,
            3,
            4,
            seeded(11, k * k * 12),
            Some(seeded(12, 4)),
            false,
        )
        .unwrap();
        let expect = naive_conv(&x, &conv);
        let got = predict(&single(conv, [3, 5, 5]), &x).unwrap();
        let dev = got
            .data()
            .iter()
            .zip(&expect)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-6, "k={k} pad={pad} stride={stride}: {dev}");
    }
}

#[test]
fn identity_pointwise_conv_is_identity() {
    let mut w = vec![0.0; 9];
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let net = single(Conv::same(1, 3, 3, w, None, false).unwrap(), [3, 4, 4]);
    let x = tensor(3, 2, 3, 4, 4);
    assert_eq!(predict(&net, &x).unwrap().data(), x.data());
}

#[test]
fn relu_layer_collapses_negatives() {
    let net = Network::new("r", [2, 1, 1], vec![Layer::new("relu", LayerOp::Relu)]).unwrap();
    let x = Tensor4::new(1, 2, 1, 1, vec![-1.0, 2.0]).unwrap();
    assert_eq!(predict(&net, &x).unwrap().data(), &[0.0, 2.0]);
}

#[test]
fn forward_rejects_wrong_shape_and_captures_requested_layers() {
    let net = two_layer_bn_net(3);
    assert!(matches!(predict(&net, &tensor(1, 1, 2, 6, 6)), Err(Error::InvalidArgument(_))));
    let (_, trace) = forward(&net, &tensor(1, 2, 3, 6, 6), &[0, 3]).unwrap();
    assert_eq!(trace.outputs.keys().copied().collect::<Vec<_>>(), vec![0, 3]);
    assert_eq!(trace.outputs[&0].shape(), [2, 4, 6, 6]);
    assert_eq!(trace.outputs[&3].shape(), [2, 4, 3, 3]);
}

fn two_layer_bn_net(seed: u64) -> Network {
    let bn = |s: u64, c: usize| BatchNorm {
        gamma: seeded(s, c).iter().map(|v| 1.0 + v).collect(),
        beta: seeded(s + 1, c),
        mean: seeded(s + 2, c),
        var: seeded(s + 3, c).iter().map(|v| 0.5 + v.abs()).collect(),
        eps: 1e-5,
    };
    let layers = vec![
        Layer::conv("c1", Conv::same(3, 3, 4, seeded(seed, 108), Some(seeded(seed + 1, 4)), false).unwrap()),
        Layer::new("bn1", LayerOp::BatchNorm(bn(seed + 10, 4))),
        Layer::new("r1", LayerOp::Relu),
        Layer::new("p1", LayerOp::MaxPool { k: 2, stride: 2 }),
        Layer::conv("c2", Conv::same(3, 4, 5, seeded(seed + 2, 180), None, false).unwrap()),
        Layer::new("bn2", LayerOp::BatchNorm(bn(seed + 20, 5))),
        Layer::new("r2", LayerOp::Relu),
        Layer::conv("fc", Conv::dense(3, 5, 3, seeded(seed + 3, 135), Some(vec![0.0; 3]), false).unwrap()),
    ];
    Network::new("bn", [3, 6, 6], layers).unwrap()
}

#[test]
fn identity_batchnorm_leaves_weights() {
    let conv = Conv::same(1, 2, 2, vec![1.5, -2.0, 0.5, 3.0], Some(vec![0.1, 0.2]), false).unwrap();
    let bn = BatchNorm {
        gamma: vec![1.0; 2],
        beta: vec![0.0; 2],
        mean: vec![0.0; 2],
        var: vec![1.0; 2],
        eps: 0.0,
    };
    let net = Network::new(
        "n",
        [2, 2, 2],
        vec![Layer::conv("c", conv.clone()), Layer::new("bn", LayerOp::BatchNorm(bn))],
    )
    .unwrap();
    let folded = fold_batchnorm(&net).unwrap();
    assert_eq!(folded.layers.len(), 1);
    assert_eq!(folded.layers[0].as_conv().unwrap(), &conv);
}

#[test]
fn batchnorm_scale_two_shift_one() {
    let w = 0.75f32;
    let (var, eps) = (3.0f32, 1e-5f32);
    let conv = Conv::same(1, 1, 1, vec![w], None, false).unwrap();
    let bn = BatchNorm {
        gamma: vec![2.0],
        beta: vec![1.0],
        mean: vec![0.4],
        var: vec![var],
        eps,
    };
    let net = Network::new(
        "n",
        [1, 3, 3],
        vec![Layer::conv("c", conv), Layer::new("bn", LayerOp::BatchNorm(bn))],
    )
    .unwrap();
    let folded = fold_batchnorm(&net).unwrap();
    let c = folded.layers[0].as_conv().unwrap();
    let s = 2.0 / ((var + eps) as f64).sqrt();
    assert!((c.weight[0] as f64 - s * w as f64).abs() < 1e-6);
    assert!((c.bias.as_ref().unwrap()[0] as f64 - (1.0 - s * 0.4)).abs() < 1e-6);
    let x = tensor(5, 4, 1, 3, 3);
    let dev = predict(&net, &x).unwrap().max_abs_diff(&predict(&folded, &x).unwrap());
    assert!(dev <= 1e-5, "{dev}");
}

#[test]
fn folded_two_layer_net_matches() {
    let net = two_layer_bn_net(21);
    let folded = fold_batchnorm(&net).unwrap();
    assert!(folded.layers.iter().all(|l| !matches!(l.op, LayerOp::BatchNorm(_))));
    let x = tensor(22, 16, 3, 6, 6);
    let dev = predict(&net, &x).unwrap().max_abs_diff(&predict(&folded, &x).unwrap());
    assert!(dev <= 1e-5, "{dev}");
}

#[test]
fn batchnorm_without_linear_layer_is_unsupported() {
    let bn = BatchNorm {
        gamma: vec![1.0],
        beta: vec![0.0],
        mean: vec![0.0],
        var: vec![1.0],
        eps: 1e-5,
    };
    let net = Network::new("n", [1, 2, 2], vec![Layer::new("bn", LayerOp::BatchNorm(bn))]).unwrap();
    assert!(matches!(fold_batchnorm(&net), Err(Error::UnsupportedStructure(_))));
}

#[test]
fn model_round_trip_is_byte_identical() {
    let net = two_layer_bn_net(5);
    let bytes = model_to_bytes(&net).unwrap();
    let back = model_from_bytes(&bytes).unwrap();
    assert_eq!(back, net);
    assert_eq!(model_to_bytes(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ldrf");
    save_model(&net, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_model(&path).unwrap(), net);
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let mut bytes = model_to_bytes(&two_layer_bn_net(5)).unwrap();
    bytes[0] = b'X';
    assert!(matches!(model_from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn truncated_blob_is_a_format_error() {
    let bytes = model_to_bytes(&two_layer_bn_net(5)).unwrap();
    let cut = &bytes[..bytes.len() - 4];
    assert!(matches!(model_from_bytes(cut), Err(Error::Format { .. })));
}

#[test]
fn inconsistent_manifest_names_the_layer() {
    let bytes = model_to_bytes(&two_layer_bn_net(5)).unwrap();
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
    let layer = manifest["layers"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .find(|l| l["name"] == "c2")
        .unwrap();
    layer["c_out"] = serde_json::json!(6);
    let text = serde_json::to_vec(&manifest).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[16 + mlen..]);
    match model_from_bytes(&out) {
        Err(Error::Format { message, .. }) => assert!(message.contains("'c2'"), "{message}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn forward_is_deterministic() {
    let net = two_layer_bn_net(9);
    let x = tensor(10, 300, 3, 6, 6);
    assert_eq!(predict(&net, &x).unwrap(), predict(&net, &x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_conv_matches_naive(seed in 0u64..1000, c in 1usize..4, n in 1usize..4, k in prop::sample::select(vec![1usize, 3]), relu: bool) {
        let x = tensor(seed, 2, c, 5, 4);
        let conv = Conv::same(k, c, n, seeded(seed + 1, k * k * c * n), Some(seeded(seed + 2, n)), relu).unwrap();
        let expect = naive_conv(&x, &conv);
        let got = predict(&single(conv, [c, 5, 4]), &x).unwrap();
        for (&a, &b) in got.data().iter().zip(&expect) {
            prop_assert!((a as f64 - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn prop_relu_is_nonnegative_and_keeps_positives(vals in prop::collection::vec(-5.0f32..5.0, 1..40)) {
        let n = vals.len();
        let net = Network::new("r", [n, 1, 1], vec![Layer::new("relu", LayerOp::Relu)]).unwrap();
        let out = predict(&net, &Tensor4::new(1, n, 1, 1, vals.clone()).unwrap()).unwrap();
        for (&o, &v) in out.data().iter().zip(&vals) {
            prop_assert!(o >= 0.0);
            if v > 0.0 {
                prop_assert_eq!(o, v);
            }
        }
    }

    #[test]
    fn prop_model_round_trip(seed in 0u64..500) {
        let net = two_layer_bn_net(seed);
        let bytes = model_to_bytes(&net).unwrap();
        prop_assert_eq!(model_to_bytes(&model_from_bytes(&bytes).unwrap()).unwrap(), bytes);
    }
}
