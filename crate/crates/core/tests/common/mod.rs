#![allow(dead_code)]

use freshnets::netspec::{CompressionOverride, InputShape, LayerSpec, PostOp};
use freshnets::{build, Compression, CompressionMethod, Network, NetworkSpec, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pins layer `i` of `spec` to exactly `k` stored weights.
pub fn pin_budget(spec: &mut NetworkSpec, i: usize, k: usize) {
    let dense = spec.layers[i].dense_weight_count();
    spec.layers[i].compression_override = Some(CompressionOverride {
        rate: Some(k as f64 / dense as f64),
        ..Default::default()
    });
}

/// conv(1→2, 3×3) → MP → RL → fc(18→10) on 1×6×6 inputs, with `conv_k`
/// conv buckets and 40 fc buckets.
pub fn tiny_spec(conv_k: usize) -> NetworkSpec {
    let mut spec = NetworkSpec {
        input: InputShape {
            channels: 1,
            rows: 6,
            cols: 6,
        },
        layers: vec![
            LayerSpec::conv(1, 2, 3, &[PostOp::MaxPool, PostOp::Relu]),
            LayerSpec::fc(18, 10, &[]),
        ],
        dropout_rate: 0.5,
    };
    pin_budget(&mut spec, 0, conv_k);
    pin_budget(&mut spec, 1, 40);
    spec
}

/// Conv budget of [`tiny_spec`] used for each method (LRD needs a whole
/// rank-1 factorisation, 9 + 2 scalars).
pub fn tiny_budget(method: CompressionMethod) -> usize {
    match method {
        CompressionMethod::Lrd => 11,
        _ => 8,
    }
}

pub fn tiny_net(method: CompressionMethod, seed: u64) -> Network {
    let spec = tiny_spec(tiny_budget(method));
    build(&spec, &Compression::new(method, 0.5).with_seed(seed)).unwrap()
}

pub fn random_batch(dims: [usize; 4], classes: usize, seed: u64) -> (Tensor4, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor4::from_fn(dims, |_| rng.gen_range(-1.0..1.0));
    let labels = (0..dims[0]).map(|_| rng.gen_range(0..classes)).collect();
    (images, labels)
}

/// Also randomises every parameter group so gradients are not dominated by
/// the initialisation's particular scale.
pub fn perturb_params(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in net.param_groups_mut() {
        for p in g.iter_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Largest relative error between backprop and central differences over
/// every trainable scalar of `net`. With `dropout_seed`, runs in training
/// mode with the same dropout masks for every evaluation.
pub fn max_grad_error(
    net: &mut Network,
    images: &Tensor4,
    labels: &[usize],
    eps: f64,
    dropout_seed: Option<u64>,
) -> (f64, usize) {
    let loss = |net: &Network| {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0));
        net.loss_and_grads(images, labels, dropout_seed.is_some(), &mut rng).unwrap()
    };
    let (_, grads) = loss(net);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (g, grad) in grads.iter().enumerate() {
        for (i, &analytic) in grad.iter().enumerate() {
            let orig = net.param_groups()[g][i];
            net.param_groups_mut()[g][i] = orig + eps;
            let (lp, _) = loss(net);
            net.param_groups_mut()[g][i] = orig - eps;
            let (lm, _) = loss(net);
            net.param_groups_mut()[g][i] = orig;
            worst = worst.max(rel_err(analytic, (lp - lm) / (2.0 * eps)));
            checked += 1;
        }
    }
    (worst, checked)
}
