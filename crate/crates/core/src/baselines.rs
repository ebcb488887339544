//! Comparison parameterisations for convolutional layers: spatial-domain
//! hashing, frequency dropping, low-rank factorisation, and filter dropping
//! (a spec rewrite rather than a layer type).

use nalgebra::DMatrix;
use rand::Rng;

use crate::dct::DctPlan;
use crate::error::{contract, Error, Result};
use crate::fresh::TyingTable;
use crate::hashing::{self, band_of, HashKey};
use crate::layer::{FilterBank, LayerHeader, Method};
use crate::netspec::{LayerKind, NetworkSpec};
use crate::ops::gemm;
use crate::tensor::{glorot_uniform, Tensor4};

fn glorot_filters<R: Rng + ?Sized>(m: usize, n: usize, d: usize, rng: &mut R) -> Tensor4 {
    let data = glorot_uniform(m * d * d, n * d * d, n * m * d * d, rng);
    Tensor4::from_vec([n, m, d, d], data).expect("length matches dims")
}

/// HashedNets applied directly to spatial filter weights: every
/// `(k, l, i1, i2)` shares one hash space of `K` buckets.
#[derive(Clone, Debug)]
pub struct SpatialHashedConvStore {
    m: usize,
    n: usize,
    d: usize,
    layer_seed: u64,
    use_sign: bool,
    w: Vec<f64>,
    table: TyingTable,
}

impl SpatialHashedConvStore {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        m: usize,
        n: usize,
        d: usize,
        buckets: usize,
        layer_seed: u64,
        use_sign: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = Self::from_parts(m, n, d, layer_seed, use_sign, vec![0.0; buckets])?;
        let dense = glorot_filters(m, n, d, rng);
        store.w = store.table.bucket_init(dense.data(), buckets);
        Ok(store)
    }

    pub fn from_parts(m: usize, n: usize, d: usize, layer_seed: u64, use_sign: bool, w: Vec<f64>) -> Result<Self> {
        let buckets = w.len();
        if buckets == 0 || buckets > m * n * d * d {
            return Err(Error::Allocation(format!(
                "spatial hashing of {} weights into {buckets} buckets",
                m * n * d * d
            )));
        }
        let table = TyingTable::build(n * m * d * d, |i| {
            let (l, k, i1, i2) = (i / (m * d * d), (i / (d * d)) % m, (i / d) % d, i % d);
            let key = HashKey::new(layer_seed, k, l, i1, i2);
            let bucket = hashing::bucket_index(&key, buckets).expect("buckets > 0");
            let sign = if use_sign { hashing::sign_hash(&key) } else { 1.0 };
            (bucket, sign)
        });
        Ok(Self {
            m,
            n,
            d,
            layer_seed,
            use_sign,
            w,
            table,
        })
    }
}

impl FilterBank for SpatialHashedConvStore {
    fn method(&self) -> Method {
        Method::HashedSpatial
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
        let mut t = Tensor4::zeros(self.filter_dims());
        self.table.gather(&self.w, t.data_mut());
        t
    }

    fn pull_back(&self, filter_grad: &Tensor4) -> Result<Vec<f64>> {
        contract!(filter_grad.dims() == self.filter_dims(), "filter gradient dims mismatch");
        Ok(self.table.scatter(filter_grad.data(), self.w.len()))
    }

    fn header(&self) -> LayerHeader {
        LayerHeader {
            layer_seed: self.layer_seed,
            k_total: self.w.len() as u64,
            band_counts: vec![self.w.len() as u64],
            use_sign: self.use_sign,
            ..Default::default()
        }
    }
}

/// Coefficient positions `j1*d + j2` kept by frequency dropping: lowest band
/// first, ties by `(j1, j2)`.
pub fn dropfreq_kept_positions(d: usize, keep: usize) -> Vec<usize> {
    let mut pos: Vec<(usize, usize, usize)> = (0..d)
        .flat_map(|j1| (0..d).map(move |j2| (band_of(j1, j2), j1, j2)))
        .collect();
    pos.sort_unstable();
    pos.into_iter().take(keep).map(|(_, j1, j2)| j1 * d + j2).collect()
}

/// Frequency dropping: each filter learns only its `keep` lowest-frequency
/// DCT coefficients; everything else is pinned at zero.
#[derive(Clone, Debug)]
pub struct DropFreqStore {
    m: usize,
    n: usize,
    d: usize,
    budget: usize,
    kept: Vec<usize>,
    /// `(l, k, kept index)` row-major.
    coeffs: Vec<f64>,
    plan: DctPlan,
}

impl DropFreqStore {
    /// Coefficients kept per filter under `budget`: `floor(budget / (m·n))`, at most `d²`.
    pub fn keep_for(m: usize, n: usize, d: usize, budget: usize) -> Result<usize> {
        if budget < m * n {
            return Err(Error::Allocation(format!(
                "frequency dropping needs at least one coefficient per filter: budget {budget} < {} filters",
                m * n
            )));
        }
        Ok((budget / (m * n)).min(d * d))
    }

    pub fn new<R: Rng + ?Sized>(m: usize, n: usize, d: usize, budget: usize, rng: &mut R) -> Result<Self> {
        let dense = glorot_filters(m, n, d, rng);
        Self::from_filters(&dense, budget)
    }

    /// Keeps the low-frequency DCT coefficients of existing filters.
    pub fn from_filters(filters: &Tensor4, budget: usize) -> Result<Self> {
        let [n, m, d, _] = filters.dims();
        let keep = Self::keep_for(m, n, d, budget)?;
        let kept = dropfreq_kept_positions(d, keep);
        let plan = DctPlan::new(d);
        let full = plan.dct2_batch(filters)?;
        let coeffs = full
            .data()
            .chunks(d * d)
            .flat_map(|f| kept.iter().map(move |&p| f[p]))
            .collect();
        Ok(Self {
            m,
            n,
            d,
            budget,
            kept,
            coeffs,
            plan,
        })
    }

    pub fn from_parts(m: usize, n: usize, d: usize, budget: usize, coeffs: Vec<f64>) -> Result<Self> {
        let keep = Self::keep_for(m, n, d, budget)?;
        contract!(
            coeffs.len() == n * m * keep,
            "{} coefficients for {} filters keeping {keep} each",
            coeffs.len(),
            n * m
        );
        Ok(Self {
            m,
            n,
            d,
            budget,
            kept: dropfreq_kept_positions(d, keep),
            coeffs,
            plan: DctPlan::new(d),
        })
    }

    pub fn keep(&self) -> usize {
        self.kept.len()
    }
}

impl FilterBank for DropFreqStore {
    fn method(&self) -> Method {
        Method::DropFreq
    }

    fn filter_dims(&self) -> [usize; 4] {
        [self.n, self.m, self.d, self.d]
    }

    fn params(&self) -> &[f64] {
        &self.coeffs
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    fn reconstruct(&self) -> Tensor4 {
        let dd = self.d * self.d;
        let mut freq = Tensor4::zeros(self.filter_dims());
        let keep = self.kept.len();
        for (f, c) in freq.data_mut().chunks_mut(dd).zip(self.coeffs.chunks(keep)) {
            for (&p, &v) in self.kept.iter().zip(c) {
                f[p] = v;
            }
        }
        self.plan.idct2_batch(&freq).expect("plan matches store")
    }

    fn pull_back(&self, filter_grad: &Tensor4) -> Result<Vec<f64>> {
        contract!(filter_grad.dims() == self.filter_dims(), "filter gradient dims mismatch");
        let freq = self.plan.dct2_batch(filter_grad)?;
        Ok(freq
            .data()
            .chunks(self.d * self.d)
            .flat_map(|f| self.kept.iter().map(move |&p| f[p]))
            .collect())
    }

    fn header(&self) -> LayerHeader {
        LayerHeader {
            k_total: self.budget as u64,
            ..Default::default()
        }
    }
}

/// Low-rank factorisation of the unfolded `(m·d²) × n` filter matrix as `A·B`.
/// Row `(k·d + u)·d + v` of the unfolding holds tap `(u, v)` of input plane `k`;
/// column `l` is output plane `l`.
#[derive(Clone, Debug)]
pub struct LrdStore {
    m: usize,
    n: usize,
    d: usize,
    rank: usize,
    budget: usize,
    /// `A` (`m·d² × r`) followed by `B` (`r × n`), both row-major.
    ab: Vec<f64>,
}

impl LrdStore {
    /// `max(1, floor(budget / (m·d² + n)))`, capped at full rank.
    pub fn rank_for(m: usize, n: usize, d: usize, budget: usize) -> Result<usize> {
        let per_rank = m * d * d + n;
        if budget < per_rank {
            return Err(Error::Allocation(format!(
                "low-rank budget {budget} is below the {per_rank} scalars of a rank-1 factorisation"
            )));
        }
        Ok((budget / per_rank).max(1).min((m * d * d).min(n)))
    }

    /// Truncated-SVD initialisation from a Glorot-initialised filter bank.
    pub fn new<R: Rng + ?Sized>(m: usize, n: usize, d: usize, budget: usize, rng: &mut R) -> Result<Self> {
        let rank = Self::rank_for(m, n, d, budget)?;
        let mut store = Self::from_filters(&glorot_filters(m, n, d, rng), rank)?;
        store.budget = budget;
        Ok(store)
    }

    /// Best rank-`rank` approximation (in Frobenius norm) of `filters`,
    /// split as `A = U·sqrt(S)`, `B = sqrt(S)·Vᵀ`.
    pub fn from_filters(filters: &Tensor4, rank: usize) -> Result<Self> {
        let [n, m, d, _] = filters.dims();
        let rows = m * d * d;
        contract!(rank >= 1 && rank <= rows.min(n), "rank {rank} outside 1..={}", rows.min(n));
        let unfolded = DMatrix::from_fn(rows, n, |r, l| filters.data()[l * rows + r]);
        let svd = unfolded.svd(true, true);
        let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
        // nalgebra does not promise sorted singular values
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut ab = vec![0.0; rows * rank + rank * n];
        for (t, &s_idx) in order.iter().take(rank).enumerate() {
            let root = svd.singular_values[s_idx].sqrt();
            for r in 0..rows {
                ab[r * rank + t] = u[(r, s_idx)] * root;
            }
            for l in 0..n {
                ab[rows * rank + t * n + l] = vt[(s_idx, l)] * root;
            }
        }
        Ok(Self {
            m,
            n,
            d,
            rank,
            budget: rank * (rows + n),
            ab,
        })
    }

    pub fn from_parts(m: usize, n: usize, d: usize, budget: usize, ab: Vec<f64>) -> Result<Self> {
        let rank = Self::rank_for(m, n, d, budget)?;
        contract!(
            ab.len() == rank * (m * d * d + n),
            "{} factor entries for rank {rank}",
            ab.len()
        );
        Ok(Self {
            m,
            n,
            d,
            rank,
            budget,
            ab,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.ab.split_at(self.m * self.d * self.d * self.rank)
    }
}

impl FilterBank for LrdStore {
    fn method(&self) -> Method {
        Method::Lrd
    }

    fn filter_dims(&self) -> [usize; 4] {
        [self.n, self.m, self.d, self.d]
    }

    fn params(&self) -> &[f64] {
        &self.ab
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.ab
    }

    fn reconstruct(&self) -> Tensor4 {
        let rows = self.m * self.d * self.d;
        let (a, b) = self.split();
        let mut t = Tensor4::zeros(self.filter_dims());
        // filters viewed as n × rows = (A·B)ᵀ = Bᵀ·Aᵀ
        gemm(self.n, self.rank, rows, b, true, a, true, 0.0, t.data_mut());
        t
    }

    fn pull_back(&self, filter_grad: &Tensor4) -> Result<Vec<f64>> {
        contract!(filter_grad.dims() == self.filter_dims(), "filter gradient dims mismatch");
        let rows = self.m * self.d * self.d;
        let (a, b) = self.split();
        let g = filter_grad.data(); // n × rows, i.e. the unfolded gradient transposed
        let mut out = vec![0.0; self.ab.len()];
        let (ga, gb) = out.split_at_mut(rows * self.rank);
        gemm(rows, self.n, self.rank, g, true, b, true, 0.0, ga);
        gemm(self.rank, rows, self.n, a, true, g, true, 0.0, gb);
        Ok(out)
    }

    fn header(&self) -> LayerHeader {
        LayerHeader {
            k_total: self.budget as u64,
            ..Default::default()
        }
    }
}

/// Filter dropping: scales every conv layer's output-plane count by `rate`
/// (floor, at least 1) and cascades the new plane counts downstream.
pub fn dropfilt_spec(spec: &NetworkSpec, rate: f64) -> Result<NetworkSpec> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("filter-dropping rate {rate} outside (0, 1]")));
    }
    let mut out = spec.clone();
    let mut planes = spec.input.channels;
    let (mut rows, mut cols) = (spec.input.rows, spec.input.cols);
    let mut first_fc = true;
    for layer in &mut out.layers {
        match layer.kind {
            LayerKind::Conv => {
                layer.in_planes = planes;
                layer.out_planes = (((layer.out_planes as f64) * rate + 1e-9).floor() as usize).max(1);
                planes = layer.out_planes;
                let pools = layer.pool_count();
                rows >>= pools;
                cols >>= pools;
            }
            LayerKind::Fc => {
                if first_fc {
                    layer.in_planes = planes * rows * cols;
                    first_fc = false;
                }
            }
        }
    }
    out.validate()?;
    Ok(out)
}
