//! Mini-batch SGD with momentum, validation-based early stopping and
//! per-epoch metric records.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormalizationKind};
use crate::error::{contract, Error, Result};
use crate::hashing::derive_seed;
use crate::netspec::{build, Compression, CompressionMethod, NetworkSpec};
use crate::network::Network;
use crate::ops;
use crate::tensor::Batch;

fn default_batch_size() -> usize {
    64
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lr() -> f64 {
    0.01
}
fn default_max_epochs() -> usize {
    15
}
fn default_patience() -> usize {
    3
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_compression() -> Compression {
    Compression::new(CompressionMethod::Fresh, 1.0 / 16.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without a validation improvement tolerated before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Halve the learning rate every `ceil(patience / 2)` stale epochs.
    #[serde(default = "crate::training::default_true")]
    pub lr_halving: bool,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Drives shuffling and dropout masks.
    #[serde(default)]
    pub seed: u64,
    /// Drives the train/validation split and any subsetting, so that runs
    /// with different `seed`s can share identical data.
    #[serde(default)]
    pub data_seed: u64,
    /// Bit-reproducible metric logs: wall time is recorded as 0. Kernels are
    /// sequential with a fixed reduction order, so parameters and losses are
    /// reproducible regardless.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_compression")]
    pub compression: Compression,
    #[serde(default)]
    pub normalization: NormalizationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

pub(crate) fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    pub fn split_config(&self) -> crate::data::SplitConfig {
        crate::data::SplitConfig {
            val_fraction: self.val_fraction,
            seed: self.data_seed,
            train_limit: self.train_limit,
            test_limit: self.test_limit,
            normalization: self.normalization,
        }
    }
}

/// `v ← momentum·v − lr·g; p ← p + v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    contract!(
        params.len() == grads.len() && params.len() == velocity.len(),
        "sgd shapes: {} params, {} grads, {} velocity",
        params.len(),
        grads.len(),
        velocity.len()
    );
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub error: f64,
    /// Wall time of the epoch; 0 under the determinism flag.
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_error: f64,
    pub epochs_run: usize,
}

/// Misclassification rate and mean loss of `network` on `batch` (eval mode).
pub fn evaluate(network: &Network, batch: &Batch) -> Result<(f64, f64)> {
    const CHUNK: usize = 500;
    if batch.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut wrong, mut loss) = (0usize, 0.0);
    let idx: Vec<usize> = (0..batch.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let part = batch.select(chunk);
        let logits = network.logits(&part.images)?;
        let (l, _) = ops::softmax_xent(&logits, &part.labels)?;
        loss += l * chunk.len() as f64;
        wrong += count_errors(&logits, &part.labels);
    }
    Ok((wrong as f64 / batch.len() as f64, loss / batch.len() as f64))
}

/// Rows whose argmax (first maximum on ties) differs from the label.
pub fn count_errors(logits: &crate::Tensor4, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(s, &label)| {
            let row = logits.item(s);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best != label
        })
        .count()
}

/// A trained network and the normalised splits it saw.
#[derive(Clone, Debug)]
pub struct Trained {
    pub network: Network,
    pub data: Dataset,
    pub report: TrainReport,
}

/// Splits and normalises the data, builds `spec` with `cfg.compression` and
/// trains it.
pub fn fit(
    spec: &NetworkSpec,
    pool: &Batch,
    test: &Batch,
    cfg: &TrainConfig,
    on_record: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    cfg.validate()?;
    let data = Dataset::split(pool, test, &cfg.split_config())?;
    let mut network = build(spec, &cfg.compression)?;
    let report = train(&mut network, &data, cfg, on_record)?;
    Ok(Trained {
        network,
        data,
        report,
    })
}

/// Trains in place and leaves the best-validation parameters in `network`.
/// `on_record` sees every metric record as it is produced.
pub fn train(
    network: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5348));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x444f));
    let mut velocity: Vec<Vec<f64>> = network.param_groups().iter().map(|g| vec![0.0; g.len()]).collect();
    let mut lr = cfg.learning_rate;
    let halve_every = cfg.patience.div_ceil(2);

    let mut records = Vec::new();
    let mut best = (f64::INFINITY, 0usize, network.snapshot());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.train.select(chunk);
            let (logits, tape) = network.forward(&batch.images, true, &mut dropout_rng)?;
            let (loss, dlogits) = ops::softmax_xent(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss is {loss} at epoch {epoch}, batch {b}; try a lower learning rate than {lr}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            wrong += count_errors(&logits, &batch.labels);
            let grads = network.backward(tape, dlogits)?;
            let grads = grads.into_iter().flat_map(|g| [g.params, g.bias]);
            for ((p, g), v) in network.param_groups_mut().into_iter().zip(grads).zip(&mut velocity) {
                sgd_step(p, &g, v, lr, cfg.momentum)?;
            }
        }
        let n = data.train.len().max(1) as f64;
        let (val_err, val_loss) = evaluate(network, &data.val)?;
        let seconds = if cfg.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        for rec in [
            EpochRecord {
                epoch,
                split: "train".into(),
                loss: loss_sum / n,
                error: wrong as f64 / n,
                seconds,
            },
            EpochRecord {
                epoch,
                split: "val".into(),
                loss: val_loss,
                error: val_err,
                seconds,
            },
        ] {
            on_record(&rec);
            records.push(rec);
        }
        epochs_run = epoch;

        if val_err < best.0 {
            best = (val_err, epoch, network.snapshot());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
            if cfg.lr_halving && halve_every > 0 && stale % halve_every == 0 {
                lr *= 0.5;
            }
        }
    }
    if best.1 > 0 {
        network.restore(&best.2)?;
    }
    Ok(TrainReport {
        records,
        best_epoch: best.1,
        best_val_error: best.0,
        epochs_run,
    })
}
