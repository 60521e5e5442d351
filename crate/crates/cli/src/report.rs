//! `report`: analytic bandwidth table for an architecture description,
//! an experiment config or a checkpoint.
//!
//! Architecture description (TOML):
//!
//! ```toml
//! [report]
//! model = "ResNet-18"
//! dataset = "CIFAR-10"
//! architecture = "resnet18"
//! input_size = 32
//! block_size = 4
//! bits = 32
//! gate_stem = true
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use serde::Deserialize;
use zebra_core::bandwidth::{
    conv_flops, network_report, resnet18_layers, zebra_compute_overhead, BandwidthReport, LayerSpec, OverheadRow,
    Retention,
};
use zebra_train::network::Network;
use zebra_train::{Checkpoint, ExperimentConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet18,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchReport {
    pub model: String,
    pub dataset: String,
    pub architecture: Architecture,
    pub input_size: usize,
    pub block_size: usize,
    #[serde(default = "default_bits")]
    pub bits: usize,
    #[serde(default = "default_true")]
    pub gate_stem: bool,
}

fn default_bits() -> usize {
    32
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    report: ArchReport,
}

/// Model label, dataset label and the gated layers to account for.
#[derive(Debug, Clone)]
pub struct ReportInput {
    pub model: String,
    pub dataset: String,
    pub layers: Vec<LayerSpec>,
}

impl ArchReport {
    pub fn layers(&self) -> Result<Vec<LayerSpec>, CliError> {
        match self.architecture {
            Architecture::Resnet18 => Ok(resnet18_layers(self.input_size, self.block_size, self.bits, self.gate_stem)?),
        }
    }
}

/// `.toml` files are architecture descriptions (with a `[report]` table) or
/// experiment configs; anything else is read as a checkpoint.
pub fn load_input(path: &Path, bits: Option<usize>) -> Result<ReportInput, CliError> {
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if !is_toml {
        let ck = Checkpoint::load(path)?;
        let net = ck.to_network()?;
        return network_input(&net, net.spec.arch.name(), "checkpoint", bits.unwrap_or(32));
    }
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    let value: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if value.contains_key("report") {
        let file: ReportFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut r = file.report;
        if let Some(b) = bits {
            r.bits = b;
        }
        return Ok(ReportInput { layers: r.layers()?, model: r.model, dataset: r.dataset });
    }
    let cfg = ExperimentConfig::from_toml(&text)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = zebra_train::network::ModelSpec::for_arch(cfg.model, cfg.data.image_size, cfg.data.num_classes());
    let net = Network::new(spec, Some(&cfg.zebra), &mut rng)?;
    let dataset = format!("{:?}", cfg.data.dataset).to_lowercase();
    network_input(&net, cfg.model.name(), &dataset, bits.unwrap_or(cfg.bits))
}

fn network_input(net: &Network, model: &str, dataset: &str, bits: usize) -> Result<ReportInput, CliError> {
    let layers = net.gated_layer_specs(bits);
    if layers.is_empty() {
        return Err(zebra_train::TrainError::Topology("network has no gated layers".into()).into());
    }
    Ok(ReportInput { model: model.into(), dataset: dataset.into(), layers })
}

pub fn build_report(input: &ReportInput, retained: f64) -> Result<BandwidthReport, CliError> {
    if !(0.0..=1.0).contains(&retained) {
        return Err(CliError::Usage(format!("--retained must lie in [0, 1], got {retained}")));
    }
    Ok(network_report(&input.layers, &vec![Retention::Fraction(retained); input.layers.len()])?)
}

/// Per-layer `zebra ops / conv FLOPS`, `None` for maps no convolution consumes.
pub fn compute_overhead_ratios(layers: &[LayerSpec]) -> Vec<(String, Option<f64>)> {
    layers
        .iter()
        .map(|l| (l.layer_id.clone(), conv_flops(l).map(|f| zebra_compute_overhead(l) as f64 / f)))
        .collect()
}

pub fn cmd_report(
    source: &Path,
    retained: f64,
    bits: Option<usize>,
    per_layer: bool,
    csv: Option<&Path>,
    jsonl: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let input = load_input(source, bits)?;
    let report = build_report(&input, retained)?;
    let w = |e: std::io::Error| CliError::Io { path: "<stdout>".into(), source: e };
    writeln!(out, "| Model | Dataset | Required bandwidth | Bandwidth overhead |").map_err(w)?;
    writeln!(out, "{}", OverheadRow::from_report(&input.model, &input.dataset, &report)).map_err(w)?;
    writeln!(
        out,
        "reduced: {:.2}% without overhead, {:.2}% with overhead",
        report.total.reduced_percent_without_overhead, report.total.reduced_percent_with_overhead
    )
    .map_err(w)?;
    if per_layer {
        for ((id, ratio), l) in compute_overhead_ratios(&input.layers).into_iter().zip(&input.layers) {
            let ratio = ratio.map_or("n/a".to_string(), |r| format!("{:.4}%", 100.0 * r));
            writeln!(out, "{id}: {}x{}x{} block {} compute overhead {ratio}", l.channels, l.height, l.width, l.block_size)
                .map_err(w)?;
        }
    }
    if let Some(p) = csv {
        let f = fs::File::create(p).map_err(|source| CliError::Io { path: p.into(), source })?;
        report.write_csv(f)?;
    }
    if let Some(p) = jsonl {
        let f = fs::File::create(p).map_err(|source| CliError::Io { path: p.into(), source })?;
        report.write_jsonl(f)?;
    }
    Ok(())
}
