//! Filter export: per-filter min-max scaled greyscale PGM images and a JSON
//! sidecar with value ranges and smoothness scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::FilterBank;
use crate::network::{Layer, Network};
use crate::tensor::Tensor4;

/// Maps a filter to `0..=255` using its own min and max. A constant filter
/// becomes mid-grey.
pub fn scale_to_u8(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = min_max(values);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Binary greyscale PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Contract(format!(
            "{} pixels for a {width}×{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Mean absolute difference between horizontally and vertically adjacent
/// entries of a row-major `rows × cols` plane. Zero when there are no pairs.
pub fn smoothness(plane: &[f64], rows: usize, cols: usize) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            let v = plane[r * cols + c];
            if c + 1 < cols {
                sum += (v - plane[r * cols + c + 1]).abs();
                pairs += 1;
            }
            if r + 1 < rows {
                sum += (v - plane[(r + 1) * cols + c]).abs();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub out_plane: usize,
    pub in_plane: usize,
    pub file: String,
    pub min: f64,
    pub max: f64,
    /// On raw weights.
    pub smoothness: f64,
    /// On the min-max scaled image, in `[0, 1]` units.
    pub scaled_smoothness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub method: String,
    pub filter_size: usize,
    pub mean_smoothness: f64,
    pub mean_scaled_smoothness: f64,
    pub filters: Vec<FilterStats>,
}

/// Spatial filters of conv layer `index`, produced by the layer's own
/// reconstruction (inverse DCT for FreshNets layers).
pub fn layer_filters(network: &Network, index: usize) -> Result<Tensor4> {
    let stage = network.stages().get(index).ok_or_else(|| {
        Error::Config(format!(
            "layer {index} does not exist (network has {} layers)",
            network.stages().len()
        ))
    })?;
    match &stage.layer {
        Layer::Conv(c) => Ok(c.bank.reconstruct()),
        Layer::Fc(_) => Err(Error::Config(format!("layer {index} is fully connected and has no filters"))),
    }
}

/// Statistics for every `d×d` plane of a filter bank, without writing files.
pub fn filter_stats(filters: &Tensor4) -> Vec<FilterStats> {
    let [n, m, d, _] = filters.dims();
    let mut out = Vec::with_capacity(n * m);
    for l in 0..n {
        for k in 0..m {
            let plane = filters.plane(l, k);
            let (min, max) = min_max(plane);
            let scaled: Vec<f64> = scale_to_u8(plane).iter().map(|&p| p as f64 / 255.0).collect();
            out.push(FilterStats {
                out_plane: l,
                in_plane: k,
                file: format!("filter_{l:03}_{k:03}.pgm"),
                min,
                max,
                smoothness: smoothness(plane, d, d),
                scaled_smoothness: smoothness(&scaled, d, d),
            });
        }
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

/// Report for conv layer `index` without touching the filesystem.
pub fn layer_report(network: &Network, index: usize) -> Result<LayerReport> {
    let filters = layer_filters(network, index)?;
    let stats = filter_stats(&filters);
    let method = match &network.stages()[index].layer {
        Layer::Conv(c) => format!("{:?}", c.bank.method()),
        Layer::Fc(_) => unreachable!("layer_filters rejects fc layers"),
    };
    Ok(LayerReport {
        layer: index,
        method,
        filter_size: filters.dims()[2],
        mean_smoothness: mean(stats.iter().map(|s| s.smoothness)),
        mean_scaled_smoothness: mean(stats.iter().map(|s| s.scaled_smoothness)),
        filters: stats,
    })
}

/// Writes one PGM per filter plane plus `filters.json` into `out_dir`.
pub fn export_layer(network: &Network, index: usize, out_dir: &Path) -> Result<LayerReport> {
    let report = layer_report(network, index)?;
    let filters = layer_filters(network, index)?;
    let d = report.filter_size;
    std::fs::create_dir_all(out_dir)?;
    for s in &report.filters {
        let pixels = scale_to_u8(filters.plane(s.out_plane, s.in_plane));
        std::fs::write(out_dir.join(&s.file), encode_pgm(d, d, &pixels)?)?;
    }
    std::fs::write(out_dir.join("filters.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}
