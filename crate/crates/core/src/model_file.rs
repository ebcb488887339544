//! Binary model format (all integers and floats little-endian):
//!
//! ```text
//! "FRSH"  u32 version  u64 spec_len  spec_len bytes of NetworkSpec JSON
//! per layer:
//!   u8 method tag (bit 7 set: sign hash disabled)
//!   u64 layer_seed  f64 alpha  f64 beta  u64 K_total
//!   u16 band_count  band_count × u64 K_j
//!   f64 × weights (count implied by method and layer shape)
//!   f64 × biases  (one per output plane / unit)
//! normalisation trailer:
//!   u8 kind (0 none, 1 standardise, 2 ZCA)  u64 p
//!   standardise: p × f64 mean, p × f64 std
//!   ZCA:         p × f64 mean, p·p × f64 whitening matrix (row-major)
//! ```
//!
//! Hash assignments are not stored; they are recomputed from the seeds.

use std::path::Path;

use nalgebra::DMatrix;

use crate::baselines::{DropFreqStore, LrdStore, SpatialHashedConvStore};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::fresh::{FreqWeightStore, HashedFcStore};
use crate::hashing::BandAllocation;
use crate::layer::{ConvBank, ConvLayer, DenseFilters, FcLayer, FilterBank, LayerHeader, Method};
use crate::netspec::{LayerKind, NetworkSpec};
use crate::network::{Layer, Network, Stage};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"FRSH";
pub const VERSION: u32 = 1;
const NO_SIGN_BIT: u8 = 0x80;

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a network and the input normaliser it was trained with.
pub fn to_bytes(network: &Network, normalizer: &Normalizer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = serde_json::to_vec(network.spec())?;
    out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    out.extend_from_slice(&spec);

    for stage in network.stages() {
        let (method, header, params, bias) = match &stage.layer {
            Layer::Conv(c) => (c.bank.method(), c.bank.header(), c.bank.params(), &c.bias),
            Layer::Fc(f) => (Method::HashedFc, f.store.header(), f.store.params(), &f.bias),
        };
        let tag = method.tag() | if header.use_sign { 0 } else { NO_SIGN_BIT };
        out.push(tag);
        out.extend_from_slice(&header.layer_seed.to_le_bytes());
        out.extend_from_slice(&header.alpha.to_le_bytes());
        out.extend_from_slice(&header.beta.to_le_bytes());
        out.extend_from_slice(&header.k_total.to_le_bytes());
        out.extend_from_slice(&(header.band_counts.len() as u16).to_le_bytes());
        for k in &header.band_counts {
            out.extend_from_slice(&k.to_le_bytes());
        }
        put_f64s(&mut out, params);
        put_f64s(&mut out, bias);
    }

    match normalizer {
        Normalizer::Identity => {
            out.push(0);
            out.extend_from_slice(&0u64.to_le_bytes());
        }
        Normalizer::Standardize { mean, std } => {
            out.push(1);
            out.extend_from_slice(&(mean.len() as u64).to_le_bytes());
            put_f64s(&mut out, mean);
            put_f64s(&mut out, std);
        }
        Normalizer::Zca { mean, whiten } => {
            out.push(2);
            out.extend_from_slice(&(mean.len() as u64).to_le_bytes());
            put_f64s(&mut out, mean);
            // nalgebra is column-major
            put_f64s(&mut out, whiten.transpose().as_slice());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of file reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_layer(r: &mut Reader, index: usize, spec: &NetworkSpec) -> Result<Stage> {
    let ls = &spec.layers[index];
    let start = r.pos;
    let tag = r.u8("method tag")?;
    let method = Method::from_tag(tag & !NO_SIGN_BIT)
        .ok_or_else(|| Error::Format {
            offset: start as u64,
            msg: format!("unknown method tag {tag} for layer {index}"),
        })?;
    let header = LayerHeader {
        layer_seed: r.u64("layer seed")?,
        alpha: r.f64("alpha")?,
        beta: r.f64("beta")?,
        k_total: r.u64("K_total")?,
        band_counts: {
            let n = r.u16("band count")? as usize;
            (0..n).map(|_| r.u64("band size")).collect::<Result<_>>()?
        },
        use_sign: tag & NO_SIGN_BIT == 0,
    };
    let at = |e: Error| match e {
        Error::Format { .. } => e,
        other => Error::Format {
            offset: start as u64,
            msg: format!("layer {index}: {other}"),
        },
    };
    let k = header.k_total as usize;
    let (m, n, d) = (ls.in_planes, ls.out_planes, ls.filter_size);

    let layer = match (ls.kind, method) {
        (LayerKind::Fc, Method::HashedFc) => {
            let w = r.f64s(k, "fc weights")?;
            let store = HashedFcStore::from_parts(m, n, header.layer_seed, header.use_sign, w).map_err(at)?;
            let mut fc = FcLayer::new(store);
            fc.bias = r.f64s(n, "fc bias")?;
            Layer::Fc(fc)
        }
        (LayerKind::Conv, method) if method != Method::HashedFc => {
            let bank = match method {
                Method::Dense => ConvBank::Dense(DenseFilters {
                    filters: Tensor4::from_vec([n, m, d, d], r.f64s(n * m * d * d, "filters")?).map_err(at)?,
                }),
                Method::Fresh => {
                    let counts = header.band_counts.iter().map(|&c| c as usize).collect();
                    let alloc = BandAllocation::from_counts(d, m, n, header.alpha, header.beta, counts).map_err(at)?;
                    if alloc.k_total != k {
                        return Err(at(Error::Allocation(format!(
                            "band counts sum to {}, header says {k}",
                            alloc.k_total
                        ))));
                    }
                    let w = r.f64s(k, "bucket weights")?;
                    ConvBank::Fresh(
                        FreqWeightStore::from_parts(m, n, d, header.layer_seed, alloc, header.use_sign, w).map_err(at)?,
                    )
                }
                Method::HashedSpatial => {
                    let w = r.f64s(k, "bucket weights")?;
                    ConvBank::HashedSpatial(
                        SpatialHashedConvStore::from_parts(m, n, d, header.layer_seed, header.use_sign, w).map_err(at)?,
                    )
                }
                Method::DropFreq => {
                    let keep = DropFreqStore::keep_for(m, n, d, k).map_err(at)?;
                    let c = r.f64s(n * m * keep, "kept coefficients")?;
                    ConvBank::DropFreq(DropFreqStore::from_parts(m, n, d, k, c).map_err(at)?)
                }
                Method::Lrd => {
                    let rank = LrdStore::rank_for(m, n, d, k).map_err(at)?;
                    let ab = r.f64s(rank * (m * d * d + n), "factors")?;
                    ConvBank::Lrd(LrdStore::from_parts(m, n, d, k, ab).map_err(at)?)
                }
                Method::HashedFc => unreachable!(),
            };
            let mut conv = ConvLayer::new(bank);
            conv.bias = r.f64s(n, "conv bias")?;
            Layer::Conv(conv)
        }
        _ => {
            return Err(Error::Format {
                offset: start as u64,
                msg: format!("method {method:?} does not fit layer {index} ({:?})", ls.kind),
            })
        }
    };
    Ok(Stage {
        layer,
        ops: ls.ops.clone(),
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Network, Normalizer)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a model file (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let spec_len = r.u64("spec length")? as usize;
    let spec_at = r.pos;
    let spec: NetworkSpec = serde_json::from_slice(r.take(spec_len, "spec")?).map_err(|e| Error::Format {
        offset: spec_at as u64,
        msg: format!("network spec: {e}"),
    })?;
    spec.validate()?;
    let stages = (0..spec.layers.len())
        .map(|i| read_layer(&mut r, i, &spec))
        .collect::<Result<Vec<_>>>()?;

    let kind = r.u8("normaliser kind")?;
    let p = r.u64("normaliser size")? as usize;
    let normalizer = match kind {
        0 => Normalizer::Identity,
        1 => Normalizer::Standardize {
            mean: r.f64s(p, "mean")?,
            std: r.f64s(p, "std")?,
        },
        2 => {
            let mean = r.f64s(p, "mean")?;
            let rows = r.f64s(p * p, "whitening matrix")?;
            Normalizer::Zca {
                mean,
                whiten: DMatrix::from_row_slice(p, p, &rows),
            }
        }
        k => return Err(r.err(format!("unknown normaliser kind {k}"))),
    };
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after model"));
    }
    Ok((Network::from_stages(spec, stages)?, normalizer))
}

pub fn save(path: &Path, network: &Network, normalizer: &Normalizer) -> Result<()> {
    std::fs::write(path, to_bytes(network, normalizer)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, Normalizer)> {
    from_bytes(&std::fs::read(path)?)
}
