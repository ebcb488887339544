//! IDX ingestion (raw or gzipped, as in the MNIST distribution), train /
//! validation / test splitting and input normalisation.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Batch, Tensor4};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Lower bound on the per-pixel divisor, in `[0, 1]` pixel units. Border
/// pixels that are almost always zero in training would otherwise turn a
/// single stray stroke in a test image into a value in the hundreds.
pub const STD_FLOOR: f64 = 0.1;

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Reads a file, transparently inflating gzip.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX blob with the given magic; returns dims and payload.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(format_err(0, "file shorter than the 4-byte magic"));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(format_err(0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(bytes.len(), format!("truncated header: need {header} bytes")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let len: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < len {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: dims {dims:?} need {len} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > len {
        return Err(format_err(header + len, "trailing bytes after payload"));
    }
    Ok((dims, payload))
}

/// Images as `[n, 1, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor4> {
    let bytes = read_maybe_gz(path)?;
    let (dims, payload) = parse_idx(&bytes, IMAGES_MAGIC)?;
    Tensor4::from_vec(
        [dims[0], 1, dims[1], dims[2]],
        payload.iter().map(|&p| p as f64 / 255.0).collect(),
    )
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    let (_, payload) = parse_idx(&bytes, LABELS_MAGIC)?;
    Ok(payload.iter().map(|&l| l as usize).collect())
}

/// Loads a matching image/label file pair and validates labels against `num_classes`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Batch> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    Batch::new(images, labels, num_classes)
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("{} not found in {}", stem, dir.display())))
}

/// Reads `train-*` and `t10k-*` IDX pairs from an MNIST-layout directory.
pub fn load_mnist_dir(dir: &Path, num_classes: usize) -> Result<(Batch, Batch)> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("data directory {} does not exist", dir.display())));
    }
    let train = load_idx(
        &find(dir, "train-images-idx3-ubyte")?,
        &find(dir, "train-labels-idx1-ubyte")?,
        num_classes,
    )?;
    let test = load_idx(
        &find(dir, "t10k-images-idx3-ubyte")?,
        &find(dir, "t10k-labels-idx1-ubyte")?,
        num_classes,
    )?;
    Ok((train, test))
}

/// Input preprocessing fitted on the training split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    /// Per-pixel mean/std standardisation.
    #[default]
    Standardize,
    /// Full ZCA whitening.
    Zca,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Normalizer {
    Identity,
    Standardize { mean: Vec<f64>, std: Vec<f64> },
    Zca { mean: Vec<f64>, whiten: DMatrix<f64> },
}

const ZCA_EPSILON: f64 = 1e-2;

impl Normalizer {
    pub fn fit(kind: NormalizationKind, train: &Tensor4) -> Self {
        let n = train.dims()[0].max(1);
        let p = if train.dims()[0] == 0 { 0 } else { train.len() / train.dims()[0] };
        let mut mean = vec![0.0; p];
        for s in 0..train.dims()[0] {
            mean.iter_mut().zip(train.item(s)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        match kind {
            NormalizationKind::None => Normalizer::Identity,
            NormalizationKind::Standardize => {
                let mut var = vec![0.0; p];
                for s in 0..train.dims()[0] {
                    for ((v, x), m) in var.iter_mut().zip(train.item(s)).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
                Normalizer::Standardize { mean, std }
            }
            NormalizationKind::Zca => {
                let mut cov = DMatrix::<f64>::zeros(p, p);
                for s in 0..train.dims()[0] {
                    let x = nalgebra::DVector::from_iterator(p, train.item(s).iter().zip(&mean).map(|(x, m)| x - m));
                    cov.ger(1.0 / n as f64, &x, &x, 1.0);
                }
                let eig = SymmetricEigen::new(cov);
                let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + ZCA_EPSILON).sqrt());
                let whiten = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
                Normalizer::Zca { mean, whiten }
            }
        }
    }

    pub fn apply(&self, images: &Tensor4) -> Tensor4 {
        let mut out = images.clone();
        let b = images.dims()[0];
        match self {
            Normalizer::Identity => {}
            Normalizer::Standardize { mean, std } => {
                for s in 0..b {
                    for ((x, m), sd) in out.item_mut(s).iter_mut().zip(mean).zip(std) {
                        *x = (*x - m) / sd;
                    }
                }
            }
            Normalizer::Zca { mean, whiten } => {
                for s in 0..b {
                    let centered =
                        nalgebra::DVector::from_iterator(mean.len(), images.item(s).iter().zip(mean).map(|(x, m)| x - m));
                    let y = whiten * centered;
                    out.item_mut(s).copy_from_slice(y.as_slice());
                }
            }
        }
        out
    }
}

/// Normalised train / validation / test splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    pub normalizer: Normalizer,
}

/// How to carve a dataset out of a training pool and a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of the (shuffled, truncated) training pool held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Use only this many training-pool samples (seed-selected).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub normalization: NormalizationKind,
}

impl Dataset {
    /// Shuffles the pool with `seed`, keeps the first `train_limit`, and holds
    /// out the last `val_fraction` of that order for validation. Normalisation
    /// statistics come from the remaining training split only.
    pub fn split(pool: &Batch, test: &Batch, cfg: &SplitConfig) -> Result<Self> {
        if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", cfg.val_fraction)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(cfg.train_limit.unwrap_or(usize::MAX));
        let n_val = ((order.len() as f64) * cfg.val_fraction).round() as usize;
        if n_val == 0 || n_val >= order.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n_val} of {} samples for validation",
                order.len()
            )));
        }
        let (tr, va) = order.split_at(order.len() - n_val);
        let mut test_order: Vec<usize> = (0..test.len()).collect();
        if let Some(limit) = cfg.test_limit {
            test_order.shuffle(&mut rng);
            test_order.truncate(limit);
            test_order.sort_unstable();
        }
        let mut train = pool.select(tr);
        let mut val = pool.select(va);
        let mut test = test.select(&test_order);
        let normalizer = Normalizer::fit(cfg.normalization, &train.images);
        train.images = normalizer.apply(&train.images);
        val.images = normalizer.apply(&val.images);
        test.images = normalizer.apply(&test.images);
        Ok(Self {
            train,
            val,
            test,
            normalizer,
        })
    }
}
