//! Frequency-domain hashed convolution and the hashed fully-connected layer.
//!
//! A [`FreqWeightStore`] holds the only trainable filter state of a layer: a
//! vector `w` split into one sub-vector per frequency band. Each DCT
//! coefficient `(l, k, j1, j2)` reads `ξ(key)·w^j[h^j(key)]` from the
//! sub-vector of its band `j = j1 + j2`, and the spatial filters are the
//! inverse DCT of that coefficient tensor. Backward takes the DCT of the
//! spatial filter gradient and scatter-adds it, signed, into the buckets.

use rand::Rng;

use crate::dct::DctPlan;
use crate::error::{contract, Result};
use crate::hashing::{self, allocate_buckets, band_of, BandAllocation, HashKey};
use crate::layer::{ConvContext, ConvLayer, FilterBank, LayerGrads, LayerHeader, Method};
use crate::tensor::{glorot_uniform, Tensor4};

/// Precomputed `(bucket, sign)` for every virtual weight, derived from the
/// layer seed. Runtime cache only; never serialised.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TyingTable {
    slot: Vec<u32>,
    sign: Vec<f64>,
}

impl TyingTable {
    pub(crate) fn build(len: usize, mut key_of: impl FnMut(usize) -> (usize, f64)) -> Self {
        let (slot, sign) = (0..len)
            .map(|i| {
                let (s, x) = key_of(i);
                (s as u32, x)
            })
            .unzip();
        Self { slot, sign }
    }

    pub(crate) fn gather(&self, w: &[f64], out: &mut [f64]) {
        for ((o, &s), &x) in out.iter_mut().zip(&self.slot).zip(&self.sign) {
            *o = x * w[s as usize];
        }
    }

    /// Adjoint of [`TyingTable::gather`].
    pub(crate) fn scatter(&self, grad: &[f64], buckets: usize) -> Vec<f64> {
        let mut out = vec![0.0; buckets];
        for ((&g, &s), &x) in grad.iter().zip(&self.slot).zip(&self.sign) {
            out[s as usize] += x * g;
        }
        out
    }

    /// Per-bucket initial value: the mean of `ξ·v` over the virtual values
    /// assigned to it, scaled by `sqrt(count)` so that iid zero-mean inputs
    /// keep their variance (a plain mean would shrink it by `1/count`).
    pub(crate) fn bucket_init(&self, values: &[f64], buckets: usize) -> Vec<f64> {
        let mut sum = vec![0.0; buckets];
        let mut count = vec![0usize; buckets];
        for ((&v, &s), &x) in values.iter().zip(&self.slot).zip(&self.sign) {
            sum[s as usize] += x * v;
            count[s as usize] += 1;
        }
        sum.iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / (c as f64).sqrt() })
            .collect()
    }
}

/// Shared frequency-domain weights of one FreshNets conv layer.
#[derive(Clone, Debug)]
pub struct FreqWeightStore {
    d: usize,
    m: usize,
    n: usize,
    layer_seed: u64,
    allocation: BandAllocation,
    use_sign: bool,
    /// Band sub-vectors laid end to end, band 0 first.
    w: Vec<f64>,
    plan: DctPlan,
    table: TyingTable,
}

impl FreqWeightStore {
    /// Allocates `k_total` buckets over the bands of an `m→n` layer of `d×d`
    /// filters and initialises each bucket from the (signed) DCT coefficients of a
    /// Glorot-initialised filter bank that hash into it.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        m: usize,
        n: usize,
        d: usize,
        k_total: usize,
        alpha: f64,
        beta: f64,
        layer_seed: u64,
        use_sign: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let allocation = allocate_buckets(d, m, n, k_total, alpha, beta)?;
        let mut store = Self::from_parts(m, n, d, layer_seed, allocation, use_sign, vec![0.0; k_total])?;
        let dense = Tensor4::from_vec(
            [n, m, d, d],
            glorot_uniform(m * d * d, n * d * d, n * m * d * d, rng),
        )?;
        let coeffs = store.plan.dct2_batch(&dense)?;
        store.w = store.table.bucket_init(coeffs.data(), k_total);
        Ok(store)
    }

    /// Rebuilds a store from its serialised parts.
    pub fn from_parts(
        m: usize,
        n: usize,
        d: usize,
        layer_seed: u64,
        allocation: BandAllocation,
        use_sign: bool,
        w: Vec<f64>,
    ) -> Result<Self> {
        contract!(allocation.d == d, "allocation is for d={}, layer has d={d}", allocation.d);
        contract!(
            allocation.band_sizes.first() == Some(&(m * n)),
            "allocation does not match a {m}→{n} layer"
        );
        contract!(
            w.len() == allocation.k_total,
            "{} weights for a budget of {}",
            w.len(),
            allocation.k_total
        );
        let offsets = allocation.offsets();
        let mut failed = None;
        let table = TyingTable::build(n * m * d * d, |i| {
            let (l, k, j1, j2) = (i / (m * d * d), (i / (d * d)) % m, (i / d) % d, i % d);
            let key = HashKey::new(layer_seed, k, l, j1, j2);
            let band = band_of(j1, j2);
            let bucket = hashing::bucket_index(&key, allocation.counts[band]).unwrap_or_else(|e| {
                failed = Some(e);
                0
            });
            let sign = if use_sign { hashing::sign_hash(&key) } else { 1.0 };
            (offsets[band] + bucket, sign)
        });
        if let Some(e) = failed {
            return Err(e);
        }
        Ok(Self {
            d,
            m,
            n,
            layer_seed,
            allocation,
            use_sign,
            w,
            plan: DctPlan::new(d),
            table,
        })
    }

    pub fn allocation(&self) -> &BandAllocation {
        &self.allocation
    }

    pub fn layer_seed(&self) -> u64 {
        self.layer_seed
    }

    pub fn use_sign(&self) -> bool {
        self.use_sign
    }

    /// Sub-vector `w^j`.
    pub fn band(&self, j: usize) -> &[f64] {
        let start: usize = self.allocation.counts[..j].iter().sum();
        &self.w[start..start + self.allocation.counts[j]]
    }

    /// Frequency-domain coefficient tensor `ξ·w[h]`, before the inverse DCT.
    pub fn coefficients(&self) -> Tensor4 {
        let mut t = Tensor4::zeros([self.n, self.m, self.d, self.d]);
        self.table.gather(&self.w, t.data_mut());
        t
    }

    /// Bucket gradient from a frequency-domain coefficient gradient.
    pub fn scatter_coefficients(&self, coeff_grad: &Tensor4) -> Result<Vec<f64>> {
        contract!(
            coeff_grad.dims() == [self.n, self.m, self.d, self.d],
            "coefficient gradient dims {:?}",
            coeff_grad.dims()
        );
        Ok(self.table.scatter(coeff_grad.data(), self.w.len()))
    }
}

impl FilterBank for FreqWeightStore {
    fn method(&self) -> Method {
        Method::Fresh
    }

    fn filter_dims(&self) -> [usize; 4] {
        [self.n, self.m, self.d, self.d]
    }

    fn params(&self) -> &[f64] {
        &self.w
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    fn reconstruct(&self) -> Tensor4 {
        self.plan
            .idct2_batch(&self.coefficients())
            .expect("plan matches store")
    }

    fn pull_back(&self, filter_grad: &Tensor4) -> Result<Vec<f64>> {
        contract!(filter_grad.dims() == self.filter_dims(), "filter gradient dims mismatch");
        // the frequency-domain gradient is the DCT of the spatial one
        let coeff_grad = self.plan.dct2_batch(filter_grad)?;
        self.scatter_coefficients(&coeff_grad)
    }

    fn header(&self) -> LayerHeader {
        LayerHeader {
            layer_seed: self.layer_seed,
            alpha: self.allocation.alpha,
            beta: self.allocation.beta,
            k_total: self.allocation.k_total as u64,
            band_counts: self.allocation.counts.iter().map(|&c| c as u64).collect(),
            use_sign: self.use_sign,
        }
    }
}

/// Reconstructed spatial filters of a FreshNets layer.
pub fn reconstruct_filters(store: &FreqWeightStore) -> Tensor4 {
    store.reconstruct()
}

/// `conv2d_same(input, reconstruct_filters(store), bias)`.
pub fn fresh_forward(layer: &ConvLayer<FreqWeightStore>, input: &Tensor4) -> Result<(Tensor4, ConvContext)> {
    layer.forward(input)
}

/// Bucket, bias and input gradients of a FreshNets layer.
pub fn fresh_backward(
    layer: &ConvLayer<FreqWeightStore>,
    ctx: &ConvContext,
    upstream: &Tensor4,
) -> Result<LayerGrads> {
    layer.backward(ctx, upstream, true)
}

/// Hashed weight matrix `W[i][j] = ξ(i,j)·w[h(i,j)]` of a fully-connected
/// layer, `in_dim × out_dim` row-major. Keys are `(seed, 0, 0, i, j)`.
#[derive(Clone, Debug)]
pub struct HashedFcStore {
    in_dim: usize,
    out_dim: usize,
    layer_seed: u64,
    use_sign: bool,
    w: Vec<f64>,
    table: TyingTable,
}

impl HashedFcStore {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        buckets: usize,
        layer_seed: u64,
        use_sign: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = Self::from_parts(in_dim, out_dim, layer_seed, use_sign, vec![0.0; buckets])?;
        let dense = glorot_uniform(in_dim, out_dim, in_dim * out_dim, rng);
        store.w = store.table.bucket_init(&dense, buckets);
        Ok(store)
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, layer_seed: u64, use_sign: bool, w: Vec<f64>) -> Result<Self> {
        let buckets = w.len();
        if buckets == 0 || buckets > in_dim * out_dim {
            return Err(crate::Error::Allocation(format!(
                "hashed fc layer {in_dim}×{out_dim} cannot use {buckets} buckets"
            )));
        }
        let table = TyingTable::build(in_dim * out_dim, |idx| {
            let key = HashKey::new(layer_seed, 0, 0, idx / out_dim, idx % out_dim);
            let bucket = hashing::bucket_index(&key, buckets).expect("buckets > 0");
            let sign = if use_sign { hashing::sign_hash(&key) } else { 1.0 };
            (bucket, sign)
        });
        Ok(Self {
            in_dim,
            out_dim,
            layer_seed,
            use_sign,
            w,
            table,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn layer_seed(&self) -> u64 {
        self.layer_seed
    }

    pub fn use_sign(&self) -> bool {
        self.use_sign
    }

    pub fn params(&self) -> &[f64] {
        &self.w
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    /// Virtual `in_dim × out_dim` weight matrix.
    pub fn materialize(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim * self.out_dim];
        self.table.gather(&self.w, &mut out);
        out
    }

    /// Bucket gradient from the gradient of the virtual matrix.
    pub fn pull_back(&self, weight_grad: &[f64]) -> Result<Vec<f64>> {
        contract!(
            weight_grad.len() == self.in_dim * self.out_dim,
            "weight gradient has {} entries",
            weight_grad.len()
        );
        Ok(self.table.scatter(weight_grad, self.w.len()))
    }

    pub fn header(&self) -> LayerHeader {
        LayerHeader {
            layer_seed: self.layer_seed,
            k_total: self.w.len() as u64,
            band_counts: vec![self.w.len() as u64],
            use_sign: self.use_sign,
            ..Default::default()
        }
    }
}
