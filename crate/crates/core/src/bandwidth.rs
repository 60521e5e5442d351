//! Analytic activation-map traffic model.
//!
//! For a `C x H x W` map of `B`-bit elements with a retained block fraction `S`:
//!
//! * storage        = `C·W·H·B·S` bits
//! * index overhead = `C·W·H / block²` bits (one bit per block)
//! * conv FLOPS     = `C·W·H·F²·O / s` for the convolution consuming the map
//! * gate overhead  = `C·W·H` max operations
//!
//! Byte totals are reported in binary units (1 KB = 1024 B, 1 MB = 1024² B).

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blockgrid::BlockMask;
use crate::error::{Error, Result};

pub const KB: f64 = 1024.0;
pub const MB: f64 = 1024.0 * 1024.0;

/// The convolution that reads a gated map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerConv {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// One gated activation map and, when there is one, the convolution consuming it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Effective (already shrunk) block edge.
    pub block_size: usize,
    #[serde(default = "default_bits")]
    pub bits: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumer: Option<ConsumerConv>,
}

fn default_bits() -> usize {
    32
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.block_size == 0 {
            return Err(Error::InvalidDimension(format!("layer {} has a zero dimension", self.layer_id)));
        }
        if !matches!(self.bits, 8 | 16 | 32) {
            return Err(Error::InvalidConfig(format!("bits must be 8, 16 or 32, got {}", self.bits)));
        }
        if self.height % self.block_size != 0 || self.width % self.block_size != 0 {
            return Err(Error::NotDivisible { height: self.height, width: self.width, block: self.block_size });
        }
        if let Some(c) = &self.consumer {
            if c.kernel == 0 || c.out_channels == 0 || c.stride == 0 {
                return Err(Error::InvalidDimension(format!("layer {} has a degenerate consumer", self.layer_id)));
            }
        }
        Ok(())
    }

    pub fn elements(&self) -> u64 {
        (self.channels * self.height * self.width) as u64
    }

    pub fn block_count(&self) -> u64 {
        self.elements() / (self.block_size * self.block_size) as u64
    }

    pub fn baseline_bits(&self) -> u64 {
        self.elements() * self.bits as u64
    }
}

/// `C·W·H·B·S` bits, `S` being the retained fraction.
pub fn activation_storage(layer: &LayerSpec, retained: f64) -> f64 {
    layer.baseline_bits() as f64 * retained
}

/// Exact storage when `kept_blocks` whole blocks survive.
pub fn activation_storage_blocks(layer: &LayerSpec, kept_blocks: u64) -> u64 {
    kept_blocks * (layer.block_size * layer.block_size * layer.bits) as u64
}

/// `C·W·H / block²` bits.
pub fn index_overhead(layer: &LayerSpec) -> Result<u64> {
    let b = layer.block_size;
    if b == 0 || layer.height % b != 0 || layer.width % b != 0 {
        return Err(Error::NotDivisible { height: layer.height, width: layer.width, block: b });
    }
    Ok(layer.block_count())
}

/// `C·W·H·F²·O / s`, evaluated exactly as written (division by `s`, not `s²`).
/// `None` when nothing convolves the map (e.g. it feeds the classifier).
pub fn conv_flops(layer: &LayerSpec) -> Option<f64> {
    layer.consumer.map(|c| {
        layer.elements() as f64 * (c.kernel * c.kernel * c.out_channels) as f64 / c.stride as f64
    })
}

/// `C·W·H`: one max update per element.
pub fn zebra_compute_overhead(layer: &LayerSpec) -> u64 {
    layer.elements()
}

/// How much of a layer survives gating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Retention {
    Fraction(f64),
    /// Exact kept-block count out of [`LayerSpec::block_count`].
    Blocks(u64),
}

impl Retention {
    pub fn from_mask(mask: &BlockMask) -> Self {
        Retention::Blocks(mask.kept_count() as u64)
    }

    /// Sums kept blocks over several masks of the same layer (e.g. a batch).
    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a BlockMask>) -> Self {
        Retention::Blocks(masks.into_iter().map(|m| m.kept_count() as u64).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer_id: String,
    pub baseline_bits: f64,
    pub retained_fraction: f64,
    pub stored_bits: f64,
    pub index_overhead_bits: f64,
    pub reduced_percent_with_overhead: f64,
    pub reduced_percent_without_overhead: f64,
}

impl LayerRow {
    fn new(layer_id: String, baseline: f64, stored: f64, index: f64) -> Self {
        let (with, without) = if baseline > 0.0 {
            (100.0 * (1.0 - (stored + index) / baseline), 100.0 * (1.0 - stored / baseline))
        } else {
            (0.0, 0.0)
        };
        Self {
            layer_id,
            baseline_bits: baseline,
            retained_fraction: if baseline > 0.0 { stored / baseline } else { 0.0 },
            stored_bits: stored,
            index_overhead_bits: index,
            reduced_percent_with_overhead: with,
            reduced_percent_without_overhead: without,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub rows: Vec<LayerRow>,
    pub total: LayerRow,
}

/// Per-layer storage and index accounting plus network totals.
pub fn network_report(layers: &[LayerSpec], retention: &[Retention]) -> Result<BandwidthReport> {
    if layers.is_empty() {
        return Err(Error::EmptyLayers);
    }
    if layers.len() != retention.len() {
        return Err(Error::LengthMismatch { expected: layers.len(), actual: retention.len() });
    }
    let mut rows = Vec::with_capacity(layers.len());
    for (layer, r) in layers.iter().zip(retention) {
        layer.validate()?;
        let stored = match *r {
            Retention::Fraction(s) => {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::InvalidConfig(format!("retained fraction {s} outside [0, 1]")));
                }
                activation_storage(layer, s)
            }
            Retention::Blocks(kept) => {
                if kept > layer.block_count() {
                    return Err(Error::InvalidConfig(format!(
                        "{kept} kept blocks exceeds {} blocks in {}",
                        layer.block_count(),
                        layer.layer_id
                    )));
                }
                activation_storage_blocks(layer, kept) as f64
            }
        };
        rows.push(LayerRow::new(
            layer.layer_id.clone(),
            layer.baseline_bits() as f64,
            stored,
            index_overhead(layer)? as f64,
        ));
    }
    Ok(BandwidthReport::from_rows(rows))
}

impl BandwidthReport {
    fn from_rows(rows: Vec<LayerRow>) -> Self {
        let baseline = rows.iter().map(|r| r.baseline_bits).sum();
        let stored = rows.iter().map(|r| r.stored_bits).sum();
        let index = rows.iter().map(|r| r.index_overhead_bits).sum();
        let total = LayerRow::new("total".into(), baseline, stored, index);
        Self { rows, total }
    }

    /// Report over the union of both layer sets.
    pub fn combine(&self, other: &BandwidthReport) -> BandwidthReport {
        Self::from_rows(self.rows.iter().chain(&other.rows).cloned().collect())
    }

    pub fn required_bytes(&self) -> f64 {
        self.total.baseline_bits / 8.0
    }

    pub fn overhead_bytes(&self) -> f64 {
        self.total.index_overhead_bits / 8.0
    }

    /// Index bits as a percentage of baseline bits.
    pub fn overhead_percent(&self) -> f64 {
        100.0 * self.total.index_overhead_bits / self.total.baseline_bits
    }

    /// Comma-delimited table, one row per layer followed by the total.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    /// One JSON object per line, per layer, then the total.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            let line = serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }
}

/// `model | dataset | required | overhead (pct)` in the style of a bandwidth overhead table.
#[derive(Debug, Clone, PartialEq)]
pub struct OverheadRow {
    pub model: String,
    pub dataset: String,
    pub required_bytes: f64,
    pub overhead_bytes: f64,
    pub overhead_percent: f64,
}

impl OverheadRow {
    pub fn from_report(model: &str, dataset: &str, report: &BandwidthReport) -> Self {
        Self {
            model: model.into(),
            dataset: dataset.into(),
            required_bytes: report.required_bytes(),
            overhead_bytes: report.overhead_bytes(),
            overhead_percent: report.overhead_percent(),
        }
    }

    pub fn required_mb(&self) -> f64 {
        self.required_bytes / MB
    }

    pub fn overhead_kb(&self) -> f64 {
        self.overhead_bytes / KB
    }
}

impl fmt::Display for OverheadRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "| {} | {} | {:.2} MB | {:.2} KB ({:.2}%) |",
            self.model,
            self.dataset,
            self.required_mb(),
            self.overhead_kb(),
            self.overhead_percent
        )
    }
}

/// Gated activation maps of the CIFAR-style ResNet-18 (3x3 stem, no max-pool,
/// four stages of two basic blocks at 64/128/256/512 channels).
///
/// Each residual block contributes two maps: after its first activation and
/// after the residual add. The consumer of every map is the next 3x3
/// main-path convolution; the last map feeds the classifier. With
/// `gate_stem = false` the stem output is left out of the footprint.
pub fn resnet18_layers(input_size: usize, block_size: usize, bits: usize, gate_stem: bool) -> Result<Vec<LayerSpec>> {
    let stages = [(64usize, 1usize), (128, 2), (256, 2), (512, 2)];
    // (id, channels, spatial)
    let mut maps: Vec<(String, usize, usize)> = Vec::new();
    let mut size = input_size;
    maps.push(("stem".into(), 64, size));
    for (si, &(ch, stride)) in stages.iter().enumerate() {
        for b in 0..2 {
            if b == 0 && stride > 1 {
                if size % stride != 0 {
                    return Err(Error::InvalidDimension(format!("input {input_size} not divisible by strides")));
                }
                size /= stride;
            }
            maps.push((format!("layer{}.{}.act1", si + 1, b), ch, size));
            maps.push((format!("layer{}.{}.out", si + 1, b), ch, size));
        }
    }
    // Consumer of map k is the conv producing map k+1 (main path).
    let mut consumers: Vec<Option<ConsumerConv>> = Vec::with_capacity(maps.len());
    for k in 0..maps.len() {
        consumers.push(maps.get(k + 1).map(|next| ConsumerConv {
            kernel: 3,
            out_channels: next.1,
            stride: maps[k].2 / next.2,
        }));
    }
    let skip = usize::from(!gate_stem);
    maps.into_iter()
        .zip(consumers)
        .skip(skip)
        .map(|((id, ch, s), consumer)| {
            let block = crate::blockgrid::make_layout(s, s, block_size)?.effective_block_size;
            Ok(LayerSpec { layer_id: id, channels: ch, height: s, width: s, block_size: block, bits, consumer })
        })
        .collect()
}
