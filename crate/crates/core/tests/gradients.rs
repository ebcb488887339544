mod common;

use common::*;
use freshnets::netspec::{InputShape, LayerSpec, PostOp};
use freshnets::ops;
use freshnets::{build, Compression, CompressionMethod, NetworkSpec, Tensor4};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check_method(method: CompressionMethod) {
    for seed in 0..3 {
        let mut net = tiny_net(method, seed);
        perturb_params(&mut net, 100 + seed);
        let (x, y) = random_batch([2, 1, 6, 6], 10, 200 + seed);
        let (worst, n) = max_grad_error(&mut net, &x, &y, EPS, None);
        assert!(n > 40, "{method}: only {n} scalars checked");
        assert!(worst < TOL, "{method} seed {seed}: relative error {worst:e}");
    }
}

#[test]
fn fresh_network_gradients() {
    check_method(CompressionMethod::Fresh);
}

#[test]
fn spatial_hashed_network_gradients() {
    check_method(CompressionMethod::HashedSpatial);
}

#[test]
fn dropfreq_network_gradients() {
    check_method(CompressionMethod::Dropfreq);
}

#[test]
fn lrd_network_gradients() {
    check_method(CompressionMethod::Lrd);
}

#[test]
fn dense_network_gradients() {
    check_method(CompressionMethod::None);
}

/// Two FreshNets conv layers (the second one's input gradient flows through
/// the first) plus dropout in training mode.
#[test]
fn deep_fresh_network_with_dropout() {
    let mut spec = NetworkSpec {
        input: InputShape {
            channels: 1,
            rows: 4,
            cols: 4,
        },
        layers: vec![
            LayerSpec::conv(1, 2, 3, &[PostOp::Relu]),
            LayerSpec::conv(2, 2, 3, &[PostOp::MaxPool, PostOp::Dropout, PostOp::Relu]),
            LayerSpec::fc(8, 3, &[]),
        ],
        dropout_rate: 0.25,
    };
    pin_budget(&mut spec, 0, 8);
    pin_budget(&mut spec, 1, 8);
    pin_budget(&mut spec, 2, 12);
    for seed in 0..3 {
        let mut net = build(&spec, &Compression::new(CompressionMethod::Fresh, 0.5).with_seed(seed)).unwrap();
        perturb_params(&mut net, seed);
        let (x, y) = random_batch([3, 1, 4, 4], 3, 50 + seed);
        let (worst, n) = max_grad_error(&mut net, &x, &y, EPS, Some(seed));
        assert_eq!(n, 8 + 2 + 8 + 2 + 12 + 3);
        assert!(worst < TOL, "seed {seed}: {worst:e}");
    }
}

fn numeric_input_grad(f: impl Fn(&Tensor4) -> f64, x: &Tensor4) -> Tensor4 {
    let mut g = Tensor4::zeros(x.dims());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += EPS;
        let mut m = x.clone();
        m.data_mut()[i] -= EPS;
        g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * EPS);
    }
    g
}

fn assert_close(a: &Tensor4, n: &Tensor4, what: &str) {
    for (x, y) in a.data().iter().zip(n.data()) {
        assert!(rel_err(*x, *y) < TOL, "{what}: analytic {x} vs numeric {y}");
    }
}

#[test]
fn conv_input_gradient() {
    let (x, _) = random_batch([2, 2, 5, 4], 1, 1);
    let (w, _) = random_batch([3, 2, 3, 3], 1, 2);
    let (up, _) = random_batch([2, 3, 5, 4], 1, 3);
    let loss = |x: &Tensor4| ops::conv2d_same(x, &w, &[0.1, 0.2, 0.3]).unwrap().dot(&up);
    let g = ops::conv2d_same_backward(&x, &w, &up, true).unwrap();
    assert_close(g.input.as_ref().unwrap(), &numeric_input_grad(loss, &x), "conv input");
    let wl = |w: &Tensor4| ops::conv2d_same(&x, w, &[0.0; 3]).unwrap().dot(&up);
    assert_close(&g.filters, &numeric_input_grad(wl, &w), "conv filters");
}

#[test]
fn pool_relu_fc_input_gradients() {
    let (x, _) = random_batch([2, 3, 4, 6], 1, 4);
    let (up, _) = random_batch([2, 3, 2, 3], 1, 5);
    let pool = |x: &Tensor4| ops::maxpool2(x).unwrap().0.dot(&up);
    let (_, idx) = ops::maxpool2(&x).unwrap();
    assert_close(&ops::maxpool2_backward(&idx, &up).unwrap(), &numeric_input_grad(pool, &x), "pool");

    let (up2, _) = random_batch([2, 3, 4, 6], 1, 6);
    let relu = |x: &Tensor4| ops::relu(x).dot(&up2);
    assert_close(&ops::relu_backward(&x, &up2).unwrap(), &numeric_input_grad(relu, &x), "relu");

    let (w, _) = random_batch([1, 1, 72, 4], 1, 7);
    let (up3, _) = random_batch([2, 4, 1, 1], 1, 8);
    let fc = |x: &Tensor4| ops::fc_forward(x, w.data(), &[0.0; 4]).unwrap().dot(&up3);
    let g = ops::fc_backward(&x, w.data(), &up3).unwrap();
    assert_close(&g.input, &numeric_input_grad(fc, &x), "fc input");
}

#[test]
fn softmax_gradient() {
    let (z, y) = random_batch([4, 5, 1, 1], 5, 9);
    let (_, g) = ops::softmax_xent(&z, &y).unwrap();
    let n = numeric_input_grad(|z| ops::softmax_xent(z, &y).unwrap().0, &z);
    assert_close(&g, &n, "softmax");
}
