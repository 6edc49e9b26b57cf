mod common;

use proptest::prelude::*;
use vrel::network::{fold_batchnorm, ops, BatchNormParams, Geometry};
use vrel::oracle::{naive_avgpool3d, naive_conv3d, naive_linear, naive_maxpool3d};
use vrel::tensor::{elementwise, reduce_sum, split_signs, stabilized_div, BinaryOp};
use vrel::{load_architecture, Tensor, WeightContainer};

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_matches_oracle(seed in any::<u64>()) {
        let case = conv_case(&mut rng(seed));
        let got = ops::conv3d_forward(&case.input, &case.weight, Some(&case.bias), &case.geometry).unwrap();
        let want = naive_conv3d(&case.input, &case.weight, &case.bias, case.geometry.stride, case.geometry.padding);
        prop_assert!(max_abs_diff(&got, &want) <= 1e-4);
    }

    #[test]
    fn conv_transpose_is_adjoint(seed in any::<u64>()) {
        let mut r = rng(seed);
        let case = conv_case(&mut r);
        let y = ops::conv3d_forward(&case.input, &case.weight, None, &case.geometry).unwrap();
        let g = tensor(&mut r, y.shape(), -1.0, 1.0);
        let back = ops::conv3d_transpose(&g, &case.weight, case.input.shape(), &case.geometry).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = case.input.data().iter().zip(back.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn pools_match_oracle(seed in any::<u64>()) {
        let (x, g) = pool_case(&mut rng(seed));
        let (got, mask) = ops::maxpool3d_forward(&x, &g).unwrap();
        let (want, argmax) = naive_maxpool3d(&x, g.kernel, g.stride, g.padding);
        prop_assert!(got.bitwise_eq(&want));
        prop_assert_eq!(mask.selected(), argmax.as_slice());
        let avg = ops::avgpool3d_forward(&x, &g).unwrap();
        prop_assert!(max_abs_diff(&avg, &naive_avgpool3d(&x, g.kernel, g.stride, g.padding)) <= 1e-6);
    }

    #[test]
    fn linear_matches_oracle(seed in any::<u64>(), n_in in 1usize..40, n_out in 1usize..40) {
        let mut r = rng(seed);
        let x = tensor(&mut r, &[n_in], -1.0, 1.0);
        let w = tensor(&mut r, &[n_out, n_in], -1.0, 1.0);
        let b = tensor(&mut r, &[n_out], -1.0, 1.0);
        let got = ops::linear_forward(&x, &w, Some(&b)).unwrap();
        prop_assert!(max_abs_diff(&got, &naive_linear(&x, &w, &b)) <= 1e-5);
    }

    #[test]
    fn split_signs_partitions_exactly(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
        let a = Tensor::from_slice(&values);
        let (pos, neg) = split_signs(&a);
        prop_assert!(pos.data().iter().all(|&v| v >= 0.0));
        prop_assert!(neg.data().iter().all(|&v| v <= 0.0));
        prop_assert!(pos.add(&neg).unwrap().bitwise_eq(&a));
    }

    #[test]
    fn reduce_sum_preserves_total(seed in any::<u64>(), axis in 0usize..3) {
        let a = tensor(&mut rng(seed), &[3, 4, 5], -10.0, 10.0);
        let partial = reduce_sum(&a, &[axis]).unwrap();
        let all = reduce_sum(&a, &[0, 1, 2]).unwrap();
        prop_assert_eq!(all.shape(), &[1]);
        prop_assert!((partial.sum() - a.sum()).abs() <= 1e-3);
        prop_assert!((all.data()[0] as f64 - a.sum()).abs() <= 1e-3);
    }

    #[test]
    fn stabilized_division_is_finite(a in -1e6f32..1e6, b in -1e6f32..1e6, eps in 1e-9f32..1.0) {
        prop_assert!(stabilized_div(a, b, eps).is_finite());
        prop_assert!(stabilized_div(a, 0.0, eps).is_finite());
        let t = elementwise(BinaryOp::DivStabilized, &Tensor::from_slice(&[a]), &Tensor::from_slice(&[b]), eps).unwrap();
        prop_assert!(t.is_finite());
    }
}

fn batchnorm_case(seed: u64) -> (common::ConvCase, BatchNormParams) {
    let mut r = rng(seed);
    let case = conv_case(&mut r);
    let o = case.weight.shape()[0];
    let bn = BatchNormParams {
        mean: tensor(&mut r, &[o], -0.5, 0.5),
        var: tensor(&mut r, &[o], 0.1, 2.0),
        gamma: tensor(&mut r, &[o], -1.5, 1.5),
        beta: tensor(&mut r, &[o], -0.5, 0.5),
        eps: 1e-5,
    };
    (case, bn)
}

fn apply_batchnorm(y: &Tensor, bn: &BatchNormParams) -> Tensor {
    let per_channel = y.numel() / bn.mean.numel();
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / per_channel;
            let inv = 1.0 / (bn.var.data()[c] as f64 + bn.eps as f64).sqrt();
            ((v as f64 - bn.mean.data()[c] as f64) * inv * bn.gamma.data()[c] as f64 + bn.beta.data()[c] as f64) as f32
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data).unwrap()
}

#[test]
fn folded_conv_matches_conv_then_batchnorm() {
    for seed in 0..20 {
        let (case, bn) = batchnorm_case(seed);
        let composed = apply_batchnorm(
            &naive_conv3d(&case.input, &case.weight, &case.bias, case.geometry.stride, case.geometry.padding),
            &bn,
        );
        let (w, b) = fold_batchnorm(&case.weight, &case.bias, &bn).unwrap();
        let folded = ops::conv3d_forward(&case.input, &w, Some(&b), &case.geometry).unwrap();
        assert!(max_abs_diff(&folded, &composed) <= 1e-4, "seed {seed}");
    }
}

#[test]
fn binding_folds_batchnorm_layers() {
    let config = r#"{
        "input_shape": [2, 3, 4, 4],
        "layers": [
            {"kind": "conv3d", "name": "c", "in_channels": 2, "out_channels": 3, "kernel": [1, 3, 3], "padding": [0, 1, 1], "bias": false},
            {"kind": "batchnorm", "name": "bn", "num_features": 3},
            {"kind": "relu"},
            {"kind": "flatten"},
            {"kind": "linear", "name": "fc", "in_features": 144, "out_features": 2}
        ]
    }"#;
    let arch = load_architecture(config).unwrap();
    let mut r = rng(3);
    let mut weights = WeightContainer::new();
    for (name, shape) in arch.parameters() {
        let (low, high) = if name.ends_with("running_var") { (0.2, 2.0) } else { (-1.0, 1.0) };
        weights.insert(name, tensor(&mut r, &shape, low, high)).unwrap();
    }
    let net = arch.bind(&weights).unwrap();
    assert_eq!(net.layers().len(), 4);
    assert!(net.layers().iter().all(|l| l.kind() != "batchnorm"));

    let x = tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let bn = BatchNormParams {
        mean: weights.get("bn.running_mean").unwrap().clone(),
        var: weights.get("bn.running_var").unwrap().clone(),
        gamma: weights.get("bn.weight").unwrap().clone(),
        beta: weights.get("bn.bias").unwrap().clone(),
        eps: 1e-5,
    };
    let conv = naive_conv3d(&x, weights.get("c.weight").unwrap(), &Tensor::zeros(&[3]).unwrap(), [1; 3], [0, 1, 1]);
    let hidden = apply_batchnorm(&conv, &bn).map(|v| v.max(0.0));
    let flat = hidden.reshape(&[144]).unwrap();
    let want = naive_linear(&flat, weights.get("fc.weight").unwrap(), weights.get("fc.bias").unwrap());
    assert!(max_abs_diff(&net.logits(&x).unwrap(), &want) <= 1e-4);
}

#[test]
fn maxpool_ties_pick_lowest_index() {
    let x = Tensor::full(&[1, 2, 2, 2], 1.0).unwrap();
    let (_, mask) = ops::maxpool3d_forward(&x, &Geometry::tiled([2, 2, 2])).unwrap();
    assert_eq!(mask.selected(), &[0]);
}
