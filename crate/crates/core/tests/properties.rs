mod common;

use freshnets::baselines::{DropFreqStore, SpatialHashedConvStore};
use freshnets::dct::DctPlan;
use freshnets::fresh::FreqWeightStore;
use freshnets::hashing::{allocate_buckets, bucket_index, sign_hash, HashKey};
use freshnets::layer::FilterBank;
use freshnets::ops;
use freshnets::Tensor4;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn odd_size() -> impl Strategy<Value = usize> {
    (0usize..6).prop_map(|h| 2 * h + 1)
}

fn matrix(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, d * d)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
    common::random_batch(dims, 1, seed).0
}

proptest! {
    #[test]
    fn dct_preserves_energy(v in odd_size().prop_flat_map(matrix)) {
        let d = (v.len() as f64).sqrt() as usize;
        let plan = DctPlan::new(d);
        let f = plan.dct2(&v).unwrap();
        let (ev, ef) = (dot(&v, &v), dot(&f, &f));
        prop_assert!((ev - ef).abs() <= 1e-10 * ev.max(1.0));
        let back = plan.idct2(&f).unwrap();
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dct_is_linear_and_inverse_is_its_transpose(
        (a, b) in odd_size().prop_flat_map(|d| (matrix(d), matrix(d))),
        s in -3.0f64..3.0,
    ) {
        let d = (a.len() as f64).sqrt() as usize;
        let plan = DctPlan::new(d);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let (fa, fb, fm) = (plan.dct2(&a).unwrap(), plan.dct2(&b).unwrap(), plan.dct2(&mix).unwrap());
        for i in 0..fm.len() {
            prop_assert!((fm[i] - (fa[i] + s * fb[i])).abs() < 1e-9);
        }
        // ⟨dct(a), b⟩ = ⟨a, idct(b)⟩
        let lhs = dot(&fa, &b);
        let rhs = dot(&a, &plan.idct2(&b).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn conv_is_bilinear(seed in 0u64..1000, s in -2.0f64..2.0) {
        let x1 = tensor([2, 2, 5, 6], seed);
        let x2 = tensor([2, 2, 5, 6], seed + 1);
        let w1 = tensor([3, 2, 3, 3], seed + 2);
        let w2 = tensor([3, 2, 3, 3], seed + 3);
        let zero = [0.0; 3];
        let mut xm = x1.clone();
        xm.axpy(s, &x2).unwrap();
        let mut lhs = ops::conv2d_same(&x1, &w1, &zero).unwrap();
        lhs.axpy(s, &ops::conv2d_same(&x2, &w1, &zero).unwrap()).unwrap();
        prop_assert!(ops::conv2d_same(&xm, &w1, &zero).unwrap().max_abs_diff(&lhs) < 1e-10);
        let mut wm = w1.clone();
        wm.axpy(s, &w2).unwrap();
        let mut lhs = ops::conv2d_same(&x1, &w1, &zero).unwrap();
        lhs.axpy(s, &ops::conv2d_same(&x1, &w2, &zero).unwrap()).unwrap();
        prop_assert!(ops::conv2d_same(&x1, &wm, &zero).unwrap().max_abs_diff(&lhs) < 1e-10);
    }

    #[test]
    fn pooling_routes_gradient_mass(seed in 0u64..1000) {
        let x = tensor([2, 3, 4, 6], seed);
        let up = tensor([2, 3, 2, 3], seed + 7);
        let (_, idx) = ops::maxpool2(&x).unwrap();
        let g = ops::maxpool2_backward(&idx, &up).unwrap();
        let (gs, us): (f64, f64) = (g.data().iter().sum(), up.data().iter().sum());
        prop_assert!((gs - us).abs() < 1e-12);
        // exactly one input per window receives gradient
        prop_assert_eq!(g.data().iter().filter(|v| **v != 0.0).count(), up.data().iter().filter(|v| **v != 0.0).count());
    }

    #[test]
    fn allocation_invariants(
        d in odd_size(),
        m in 1usize..6,
        n in 1usize..6,
        frac in 0.0f64..1.0,
        alpha in 0.1f64..4.0,
        beta in 0.1f64..4.0,
    ) {
        let bands = 2 * d - 1;
        let total = m * n * d * d;
        prop_assume!(total >= bands);
        let k = bands + ((total - bands) as f64 * frac) as usize;
        let a = allocate_buckets(d, m, n, k, alpha, beta).unwrap();
        prop_assert_eq!(a.counts.iter().sum::<usize>(), k);
        for (c, s) in a.counts.iter().zip(&a.band_sizes) {
            prop_assert!(*c >= 1 && c <= s);
        }
        prop_assert_eq!(&allocate_buckets(d, m, n, k, alpha, beta).unwrap(), &a);
        if alpha < 1.0 && beta > 1.0 {
            for w in a.rates.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "rates {:?}", a.rates);
            }
        }
    }

    #[test]
    fn hashes_are_in_range(seed: u64, k in 0usize..100, l in 0usize..100, j1 in 0usize..11, j2 in 0usize..11, buckets in 1usize..1000) {
        let key = HashKey::new(seed, k, l, j1, j2);
        let b = bucket_index(&key, buckets).unwrap();
        prop_assert!(b < buckets);
        prop_assert_eq!(bucket_index(&key, buckets).unwrap(), b);
        prop_assert!(sign_hash(&key) == 1.0 || sign_hash(&key) == -1.0);
    }

    /// For the linear parameterisations, the pull-back of a filter gradient
    /// is the adjoint of reconstruction: ⟨R(w), G⟩ = ⟨w, Rᵀ(G)⟩.
    #[test]
    fn pull_back_is_adjoint_of_reconstruct(seed in 0u64..500, use_sign: bool) {
        let (m, n, d) = (2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = tensor([n, m, d, d], seed + 11);
        let banks: Vec<Box<dyn FilterBank>> = vec![
            Box::new(FreqWeightStore::new(m, n, d, 13, 0.25, 2.5, seed, use_sign, &mut rng).unwrap()),
            Box::new(SpatialHashedConvStore::new(m, n, d, 13, seed, use_sign, &mut rng).unwrap()),
            Box::new(DropFreqStore::new(m, n, d, 24, &mut rng).unwrap()),
        ];
        for bank in banks {
            let r = bank.reconstruct();
            let lhs = r.dot(&g);
            let rhs = dot(bank.params(), &bank.pull_back(&g).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{:?}: {} vs {}", bank.method(), lhs, rhs);
        }
    }

    #[test]
    fn fresh_gather_scatter_adjoint(seed in 0u64..500) {
        let (m, n, d) = (3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = FreqWeightStore::new(m, n, d, 20, 1.0, 1.0, seed, true, &mut rng).unwrap();
        let c = tensor([n, m, d, d], seed + 3);
        let lhs = store.coefficients().dot(&c);
        let rhs = dot(store.params(), &store.scatter_coefficients(&c).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }
}
