//! Declarative network descriptions and the builder that turns one, plus a
//! compression setting, into a trainable [`Network`].

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{dropfilt_spec, DropFreqStore, LrdStore, SpatialHashedConvStore};
use crate::error::{Error, Result};
use crate::fresh::{FreqWeightStore, HashedFcStore};
use crate::hashing::derive_seed;
use crate::layer::{ConvBank, ConvLayer, DenseFilters, FcLayer};
use crate::network::{Layer, Network, Stage};
use crate::tensor::{glorot_uniform, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Fc,
}

/// Operation applied after a layer's linear transform, in listed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PostOp {
    /// 2×2 max-pooling, stride 2.
    #[serde(rename = "MP")]
    MaxPool,
    #[serde(rename = "DO")]
    Dropout,
    #[serde(rename = "RL")]
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Per-layer replacement for any field of the global [`Compression`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<CompressionMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_planes: usize,
    pub out_planes: usize,
    /// Square filter side for conv layers; ignored for fc layers.
    #[serde(default)]
    pub filter_size: usize,
    #[serde(default)]
    pub ops: Vec<PostOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression_override: Option<CompressionOverride>,
}

impl LayerSpec {
    pub fn conv(in_planes: usize, out_planes: usize, filter_size: usize, ops: &[PostOp]) -> Self {
        Self {
            kind: LayerKind::Conv,
            in_planes,
            out_planes,
            filter_size,
            ops: ops.to_vec(),
            compression_override: None,
        }
    }

    pub fn fc(in_planes: usize, out_planes: usize, ops: &[PostOp]) -> Self {
        Self {
            kind: LayerKind::Fc,
            in_planes,
            out_planes,
            filter_size: 0,
            ops: ops.to_vec(),
            compression_override: None,
        }
    }

    pub fn pool_count(&self) -> u32 {
        self.ops.iter().filter(|&&o| o == PostOp::MaxPool).count() as u32
    }

    /// Weights of the uncompressed layer (biases excluded).
    pub fn dense_weight_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.in_planes * self.out_planes * self.filter_size * self.filter_size,
            LayerKind::Fc => self.in_planes * self.out_planes,
        }
    }
}

fn default_dropout() -> f64 {
    0.5
}

/// Ordered layer stack. The last layer's outputs are the class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    /// Rate used by every `DO` op.
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

impl NetworkSpec {
    /// The five-conv, one-fc architecture for 32×32 colour images.
    pub fn table1(num_classes: usize) -> Self {
        use PostOp::*;
        Self {
            input: InputShape {
                channels: 3,
                rows: 32,
                cols: 32,
            },
            layers: vec![
                LayerSpec::conv(3, 32, 5, &[Relu]),
                LayerSpec::conv(32, 64, 5, &[MaxPool, Dropout, Relu]),
                LayerSpec::conv(64, 64, 5, &[Relu]),
                LayerSpec::conv(64, 128, 5, &[MaxPool, Dropout, Relu]),
                LayerSpec::conv(128, 256, 5, &[MaxPool, Dropout, Relu]),
                LayerSpec::fc(4096, num_classes, &[]),
            ],
            dropout_rate: default_dropout(),
        }
    }

    /// Two 5×5 conv layers (16 and 32 maps) and a softmax layer, for 28×28
    /// grey digits. Half the width of the four-layer frequency-scheme net.
    pub fn desk_mnist() -> Self {
        use PostOp::*;
        Self {
            input: InputShape {
                channels: 1,
                rows: 28,
                cols: 28,
            },
            layers: vec![
                LayerSpec::conv(1, 16, 5, &[MaxPool, Relu]),
                LayerSpec::conv(16, 32, 5, &[MaxPool, Relu]),
                LayerSpec::fc(32 * 7 * 7, 10, &[]),
            ],
            dropout_rate: default_dropout(),
        }
    }

    /// Copy of the spec where every conv layer whose budget at `rate` would
    /// hold fewer than one bucket per frequency band gets a rate override
    /// lifting it to exactly `2d − 1` buckets. Applies to every method alike,
    /// so comparisons at that rate stay budget-matched.
    pub fn with_band_floor(&self, rate: f64) -> Self {
        let mut out = self.clone();
        for l in out.layers.iter_mut().filter(|l| l.kind == LayerKind::Conv) {
            let bands = 2 * l.filter_size - 1;
            let dense = l.dense_weight_count();
            let has_rate = l.compression_override.as_ref().is_some_and(|o| o.rate.is_some());
            if !has_rate && layer_budget(rate, dense) < bands && bands <= dense {
                l.compression_override.get_or_insert_with(Default::default).rate = Some(bands as f64 / dense as f64);
            }
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_planes)
    }

    /// Checks plane chaining, pooling divisibility and the fc input size.
    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize, msg: String| Err(Error::Config(format!("layer {i}: {msg}")));
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        let mut planes = self.input.channels;
        let (mut rows, mut cols) = (self.input.rows, self.input.cols);
        let mut seen_fc = false;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_planes == 0 || l.out_planes == 0 {
                return bad(i, "plane counts must be positive".into());
            }
            match l.kind {
                LayerKind::Conv => {
                    if seen_fc {
                        return bad(i, "conv layer after a fully-connected layer".into());
                    }
                    if l.filter_size % 2 == 0 {
                        return bad(i, format!("filter size {} must be odd", l.filter_size));
                    }
                    if l.in_planes != planes {
                        return bad(i, format!("expects {} input planes, previous layer gives {planes}", l.in_planes));
                    }
                    for _ in 0..l.pool_count() {
                        if rows % 2 != 0 || cols % 2 != 0 {
                            return bad(i, format!("cannot max-pool a {rows}×{cols} map"));
                        }
                        rows /= 2;
                        cols /= 2;
                    }
                    planes = l.out_planes;
                }
                LayerKind::Fc => {
                    if l.pool_count() > 0 {
                        return bad(i, "max-pooling after a fully-connected layer".into());
                    }
                    let expect = if seen_fc { planes } else { planes * rows * cols };
                    if l.in_planes != expect {
                        return bad(i, format!("fc input size {} does not match {expect} incoming features", l.in_planes));
                    }
                    seen_fc = true;
                    planes = l.out_planes;
                }
            }
        }
        if !seen_fc {
            return Err(Error::Config("network must end in a fully-connected layer".into()));
        }
        if self.layers.last().map(|l| l.kind) != Some(LayerKind::Fc) {
            return Err(Error::Config("the last layer must be fully connected".into()));
        }
        Ok(())
    }
}

/// Conv-layer compression method. Fully-connected layers are always hashed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMethod {
    None,
    Fresh,
    HashedSpatial,
    Dropfreq,
    Dropfilt,
    Lrd,
}

impl fmt::Display for CompressionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::Fresh => "fresh",
            Self::HashedSpatial => "hashed_spatial",
            Self::Dropfreq => "dropfreq",
            Self::Dropfilt => "dropfilt",
            Self::Lrd => "lrd",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for CompressionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown compression method {s:?}")))
    }
}

fn default_alpha() -> f64 {
    0.25
}

fn default_beta() -> f64 {
    2.5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    pub method: CompressionMethod,
    /// Stored / virtual weight ratio in `(0, 1]`.
    pub rate: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Master seed; each layer's hash seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Apply the sign hash ξ (disable only for ablations).
    #[serde(default = "default_true")]
    pub use_sign: bool,
}

impl Compression {
    pub fn new(method: CompressionMethod, rate: f64) -> Self {
        Self {
            method,
            rate,
            alpha: default_alpha(),
            beta: default_beta(),
            seed: 0,
            use_sign: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_beta_scheme(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }
}

/// Per-layer stored-weight budget `ceil(rate · dense)`.
pub fn layer_budget(rate: f64, dense: usize) -> usize {
    ((rate * dense as f64 - 1e-9).ceil() as usize).max(1)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("compression rate {rate} outside (0, 1]")));
    }
    Ok(())
}

/// Instantiates `spec` with every conv layer compressed by `compression`
/// (or its per-layer override) and every fc layer hashed at the same rate.
pub fn build(spec: &NetworkSpec, compression: &Compression) -> Result<Network> {
    spec.validate()?;
    check_rate(compression.rate)?;
    let spec = if compression.method == CompressionMethod::Dropfilt {
        dropfilt_spec(spec, compression.rate)?
    } else {
        spec.clone()
    };

    let mut stages = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let ov = ls.compression_override.clone().unwrap_or_default();
        let method = ov.method.unwrap_or(compression.method);
        let rate = ov.rate.unwrap_or(compression.rate);
        let alpha = ov.alpha.unwrap_or(compression.alpha);
        let beta = ov.beta.unwrap_or(compression.beta);
        check_rate(rate)?;
        let seed = derive_seed(compression.seed, i as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let budget = layer_budget(rate, ls.dense_weight_count());
        let named = |e: Error| Error::Config(format!("layer {i} ({} with {method} at rate {rate}): {e}", kind_name(ls.kind)));

        let layer = match ls.kind {
            LayerKind::Conv => {
                let (m, n, d) = (ls.in_planes, ls.out_planes, ls.filter_size);
                let bank = match method {
                    CompressionMethod::None | CompressionMethod::Dropfilt => {
                        let data = glorot_uniform(m * d * d, n * d * d, n * m * d * d, &mut rng);
                        ConvBank::Dense(DenseFilters {
                            filters: Tensor4::from_vec([n, m, d, d], data)?,
                        })
                    }
                    CompressionMethod::Fresh => ConvBank::Fresh(
                        FreqWeightStore::new(m, n, d, budget, alpha, beta, seed, compression.use_sign, &mut rng)
                            .map_err(named)?,
                    ),
                    CompressionMethod::HashedSpatial => ConvBank::HashedSpatial(
                        SpatialHashedConvStore::new(m, n, d, budget, seed, compression.use_sign, &mut rng)
                            .map_err(named)?,
                    ),
                    CompressionMethod::Dropfreq => {
                        ConvBank::DropFreq(DropFreqStore::new(m, n, d, budget, &mut rng).map_err(named)?)
                    }
                    CompressionMethod::Lrd => ConvBank::Lrd(LrdStore::new(m, n, d, budget, &mut rng).map_err(named)?),
                };
                Layer::Conv(ConvLayer::new(bank))
            }
            LayerKind::Fc => Layer::Fc(FcLayer::new(
                HashedFcStore::new(ls.in_planes, ls.out_planes, budget, seed, compression.use_sign, &mut rng)
                    .map_err(named)?,
            )),
        };
        stages.push(Stage {
            layer,
            ops: ls.ops.clone(),
        });
    }
    Network::from_stages(spec, stages)
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv => "conv",
        LayerKind::Fc => "fc",
    }
}
