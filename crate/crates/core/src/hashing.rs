//! Deterministic hashing for random weight sharing and the per-band bucket
//! allocator.
//!
//! Every hash is FNV-1a 64 over a fixed 24-byte little-endian key plus a
//! one-byte domain tag, passed through the MurmurHash3 64-bit finalizer, so
//! bucket and sign assignments are reproducible from
//! `(layer_seed, alpha, beta, K_total)` alone, in any language.
//!
//! The finalizer matters. In FNV-1a, bit `i` of the output depends only on
//! bits `0..=i` of the input bytes, so the raw low bit is the parity of the
//! key bytes' low bits, and `mod K` for even `K` fixes that same bit. Signs
//! taken straight from FNV would be a function of the bucket.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

const TAG_BUCKET: u8 = 0x01;
const TAG_SIGN: u8 = 0x02;

/// FNV-1a, 64-bit.
#[inline]
pub fn hash64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// MurmurHash3 64-bit finalizer.
#[inline]
pub fn fmix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

/// Argument tuple of the weight-tying hash: which input plane `k`, output
/// plane `l`, and coefficient `(j1, j2)` of which layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HashKey {
    pub layer_seed: u64,
    pub k: u32,
    pub l: u32,
    pub j1: u32,
    pub j2: u32,
}

impl HashKey {
    pub fn new(layer_seed: u64, k: usize, l: usize, j1: usize, j2: usize) -> Self {
        Self {
            layer_seed,
            k: k as u32,
            l: l as u32,
            j1: j1 as u32,
            j2: j2 as u32,
        }
    }

    /// Canonical encoding: seed as LE u64, then `k, l, j1, j2` as LE u32.
    pub fn encode(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        out[..8].copy_from_slice(&self.layer_seed.to_le_bytes());
        out[8..12].copy_from_slice(&self.k.to_le_bytes());
        out[12..16].copy_from_slice(&self.l.to_le_bytes());
        out[16..20].copy_from_slice(&self.j1.to_le_bytes());
        out[20..24].copy_from_slice(&self.j2.to_le_bytes());
        out
    }

    fn tagged(&self, tag: u8) -> u64 {
        let mut buf = [0u8; 25];
        buf[..24].copy_from_slice(&self.encode());
        buf[24] = tag;
        fmix64(hash64(&buf))
    }
}

/// Bucket `h(key) ∈ {0, …, buckets-1}`.
pub fn bucket_index(key: &HashKey, buckets: usize) -> Result<usize> {
    if buckets == 0 {
        return Err(Error::Allocation("cannot hash into zero buckets".into()));
    }
    Ok((key.tagged(TAG_BUCKET) % buckets as u64) as usize)
}

/// Sign factor `ξ(key) ∈ {-1, +1}`, independent of [`bucket_index`] through
/// its domain tag.
pub fn sign_hash(key: &HashKey) -> f64 {
    if key.tagged(TAG_SIGN) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Frequency band of coefficient `(j1, j2)`: the index sum.
#[inline]
pub fn band_of(j1: usize, j2: usize) -> usize {
    j1 + j2
}

/// Coefficients per `d×d` filter falling in band `j` (0 ≤ j ≤ 2d-2).
pub fn band_size(d: usize, j: usize) -> usize {
    d - j.abs_diff(d - 1)
}

/// Derives a child seed, e.g. per layer: `hash64(master LE u64 ‖ index LE u32)`.
pub fn derive_seed(master: u64, index: u32) -> u64 {
    let mut buf = [0u8; 12];
    buf[..8].copy_from_slice(&master.to_le_bytes());
    buf[8..].copy_from_slice(&index.to_le_bytes());
    hash64(&buf)
}

/// Per-band bucket counts for a frequency-hashed layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandAllocation {
    pub d: usize,
    pub k_total: usize,
    pub alpha: f64,
    pub beta: f64,
    /// `K_j`, one per band.
    pub counts: Vec<usize>,
    /// `N_j = m·n·(d - |j-(d-1)|)`.
    pub band_sizes: Vec<usize>,
    /// Clamped real-valued rates `r_j` before rounding.
    pub rates: Vec<f64>,
}

impl BandAllocation {
    pub fn bands(&self) -> usize {
        self.counts.len()
    }

    /// Offset of band `j`'s sub-vector inside the flat weight vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.counts
            .iter()
            .map(|&c| {
                let o = acc;
                acc += c;
                o
            })
            .collect()
    }

    /// Rebuilds an allocation from stored counts (e.g. read from a model file).
    pub fn from_counts(d: usize, m: usize, n: usize, alpha: f64, beta: f64, counts: Vec<usize>) -> Result<Self> {
        let band_sizes: Vec<usize> = (0..2 * d - 1).map(|j| m * n * band_size(d, j)).collect();
        if counts.len() != band_sizes.len() {
            return Err(Error::Allocation(format!(
                "{} band counts for a {d}×{d} filter (expected {})",
                counts.len(),
                band_sizes.len()
            )));
        }
        if let Some(j) = (0..counts.len()).find(|&j| counts[j] == 0 || counts[j] > band_sizes[j]) {
            return Err(Error::Allocation(format!(
                "band {j} has {} buckets for {} coefficients",
                counts[j], band_sizes[j]
            )));
        }
        let rates = counts
            .iter()
            .zip(&band_sizes)
            .map(|(&c, &s)| c as f64 / s as f64)
            .collect();
        Ok(Self {
            d,
            k_total: counts.iter().sum(),
            alpha,
            beta,
            counts,
            band_sizes,
            rates,
        })
    }
}

/// Unnormalised beta-density rate weight for band `j` of `2d-1`.
/// `x = (j+1)/(2d-1)` reaches 1 at the top band, where the density is 0 for
/// `beta > 1` and unbounded for `beta < 1`; the latter is returned as `+inf`.
fn band_weight(d: usize, j: usize, alpha: f64, beta: f64) -> f64 {
    let x = (j + 1) as f64 / (2 * d - 1) as f64;
    let left = x.powf(alpha - 1.0);
    let right = if x >= 1.0 {
        if beta > 1.0 {
            0.0
        } else if beta == 1.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        (1.0 - x).powf(beta - 1.0)
    };
    left * right
}

/// Splits `k_total` buckets across the `2d-1` frequency bands of an `m→n`
/// layer of `d×d` filters.
///
/// Rates follow `r_j = Z·f(j; alpha, beta)` with `Z` fixed by
/// `Σ r_j N_j = k_total`; bands whose rate would exceed 1 are pinned at 1 and
/// `Z` is recomputed over the rest until nothing changes. Counts are
/// `max(1, floor(r_j N_j))`, then repaired one bucket at a time toward the
/// exact budget: add to the largest remainder `r_j N_j - K_j` (lower band
/// wins ties, `K_j < N_j`), or remove from the smallest remainder (higher
/// band wins ties, `K_j > 1`).
pub fn allocate_buckets(d: usize, m: usize, n: usize, k_total: usize, alpha: f64, beta: f64) -> Result<BandAllocation> {
    if d == 0 || m == 0 || n == 0 {
        return Err(Error::Allocation(format!("degenerate layer shape d={d}, m={m}, n={n}")));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::Allocation(format!(
            "beta parameters must be positive, got alpha={alpha}, beta={beta}"
        )));
    }
    let bands = 2 * d - 1;
    if k_total < bands {
        return Err(Error::Allocation(format!(
            "insufficient budget for per-band hashing: {k_total} buckets for {bands} bands"
        )));
    }
    let total = m * n * d * d;
    if k_total > total {
        return Err(Error::Allocation(format!(
            "compression rate exceeds 1: {k_total} buckets for {total} coefficients"
        )));
    }

    let sizes: Vec<usize> = (0..bands).map(|j| m * n * band_size(d, j)).collect();
    let weights: Vec<f64> = (0..bands).map(|j| band_weight(d, j, alpha, beta)).collect();
    let mut pinned: Vec<bool> = weights.iter().map(|w| w.is_infinite()).collect();
    let mut rates = vec![0.0; bands];
    loop {
        let left = k_total as f64
            - (0..bands).filter(|&j| pinned[j]).map(|j| sizes[j] as f64).sum::<f64>();
        let mass: f64 = (0..bands)
            .filter(|&j| !pinned[j])
            .map(|j| weights[j] * sizes[j] as f64)
            .sum();
        let z = if mass > 0.0 { left.max(0.0) / mass } else { 0.0 };
        for j in 0..bands {
            rates[j] = if pinned[j] { 1.0 } else { z * weights[j] };
        }
        let over: Vec<usize> = (0..bands).filter(|&j| !pinned[j] && rates[j] > 1.0).collect();
        if over.is_empty() {
            break;
        }
        for j in over {
            pinned[j] = true;
        }
    }

    let ideal: Vec<f64> = (0..bands).map(|j| rates[j] * sizes[j] as f64).collect();
    let mut counts: Vec<usize> = (0..bands)
        .map(|j| (ideal[j].floor() as usize).clamp(1, sizes[j]))
        .collect();
    let remainder = |counts: &[usize], j: usize| ideal[j] - counts[j] as f64;
    let mut sum: usize = counts.iter().sum();
    while sum < k_total {
        let j = (0..bands)
            .filter(|&j| counts[j] < sizes[j])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if remainder(&counts, b) >= remainder(&counts, j) => Some(b),
                _ => Some(j),
            })
            .expect("budget is below capacity");
        counts[j] += 1;
        sum += 1;
    }
    while sum > k_total {
        let j = (0..bands)
            .rev()
            .filter(|&j| counts[j] > 1)
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if remainder(&counts, b) <= remainder(&counts, j) => Some(b),
                _ => Some(j),
            })
            .expect("budget covers one bucket per band");
        counts[j] -= 1;
        sum -= 1;
    }

    Ok(BandAllocation {
        d,
        k_total,
        alpha,
        beta,
        counts,
        band_sizes: sizes,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(hash64(b""), 0xcbf29ce484222325);
        assert_eq!(hash64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(hash64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn key_encoding_layout() {
        let key = HashKey::new(0x0102030405060708, 1, 2, 3, 4);
        let bytes = key.encode();
        assert_eq!(&bytes[..8], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &[4, 0, 0, 0]);
    }

    #[test]
    fn single_bucket_and_zero_buckets() {
        let key = HashKey::new(9, 1, 2, 0, 1);
        assert_eq!(bucket_index(&key, 1).unwrap(), 0);
        assert!(matches!(bucket_index(&key, 0), Err(Error::Allocation(_))));
    }

    #[test]
    fn sign_is_deterministic_and_binary() {
        for i in 0..100 {
            let key = HashKey::new(42, i, 0, 1, 2);
            let s = sign_hash(&key);
            assert!(s == 1.0 || s == -1.0);
            assert_eq!(s, sign_hash(&key));
        }
    }

    #[test]
    fn fmix64_reference_values() {
        assert_eq!(fmix64(0), 0);
        assert_eq!(fmix64(1), 0xb456_bcfc_34c2_cb2c);
    }

    #[test]
    fn signs_vary_within_a_bucket() {
        let mut seen = [[false; 2]; 4];
        for i in 0..200 {
            let key = HashKey::new(7, 0, 0, i, 0);
            let b = bucket_index(&key, 4).unwrap();
            seen[b][(sign_hash(&key) > 0.0) as usize] = true;
        }
        assert!(seen.iter().all(|s| s[0] && s[1]), "{seen:?}");
    }

    #[test]
    fn band_sizes_for_five() {
        let sizes: Vec<usize> = (0..9).map(|j| band_size(5, j)).collect();
        assert_eq!(sizes, vec![1, 2, 3, 4, 5, 4, 3, 2, 1]);
        assert_eq!(sizes.iter().sum::<usize>(), 25);
        assert_eq!(band_of(0, 0), 0);
        assert_eq!(band_of(4, 4), 8);
    }

    #[test]
    fn allocation_errors() {
        assert!(allocate_buckets(3, 1, 1, 4, 1.0, 1.0)
            .unwrap_err()
            .to_string()
            .contains("insufficient budget"));
        assert!(allocate_buckets(3, 1, 1, 10, 1.0, 1.0)
            .unwrap_err()
            .to_string()
            .contains("compression rate exceeds 1"));
        assert!(allocate_buckets(3, 1, 1, 9, 0.0, 1.0).is_err());
    }

    // Frozen from an independent step-through of the allocation procedure.
    #[test]
    fn allocation_fixtures() {
        let full = allocate_buckets(3, 1, 1, 9, 1.0, 1.0).unwrap();
        assert_eq!(full.counts, vec![1, 2, 3, 2, 1]);

        let uniform = allocate_buckets(5, 1, 1, 13, 1.0, 1.0).unwrap();
        assert_eq!(uniform.counts, vec![1, 1, 1, 2, 3, 2, 1, 1, 1]);
        assert!(uniform.rates.iter().all(|r| (r - 0.52).abs() < 1e-12));

        let low = allocate_buckets(5, 1, 1, 12, 0.25, 2.5).unwrap();
        assert_eq!(low.counts, vec![1, 1, 2, 2, 2, 1, 1, 1, 1]);
        let expect = [
            1.0,
            1.0,
            1.0,
            0.6664358086153715,
            0.4033766873198297,
            0.22851607480038894,
            0.11080765773569425,
            0.03544302826536348,
            0.0,
        ];
        for (r, e) in low.rates.iter().zip(expect) {
            assert!((r - e).abs() < 1e-12);
        }

        let high = allocate_buckets(5, 1, 1, 12, 2.5, 0.25).unwrap();
        assert_eq!(high.counts, vec![1, 1, 1, 1, 1, 2, 3, 1, 1]);

        let layer = allocate_buckets(3, 2, 2, 7, 0.25, 2.5).unwrap();
        assert_eq!(layer.counts, vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn from_counts_validates() {
        assert!(BandAllocation::from_counts(3, 1, 1, 1.0, 1.0, vec![1, 2, 3, 2, 1]).is_ok());
        assert!(BandAllocation::from_counts(3, 1, 1, 1.0, 1.0, vec![1, 3, 3, 2, 1]).is_err());
        assert!(BandAllocation::from_counts(3, 1, 1, 1.0, 1.0, vec![1, 2, 3, 2]).is_err());
    }
}
