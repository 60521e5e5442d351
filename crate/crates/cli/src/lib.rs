//! `zebra` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 config, 4 I/O, 5 data or format,
//! 6 model/checkpoint, 7 training diverged, 1 anything else.

pub mod report;
pub mod viz;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;
use zebra_core::codec::{self, Dtype};
use zebra_core::{block_max, make_layout, mask_from_thresholds};
use zebra_train::data::{self, DataConfig, DatasetKind, Splits};
use zebra_train::harness::{evaluate, train};
use zebra_train::layers::Mode;
use zebra_train::tensor::Tensor;
use zebra_train::{Checkpoint, ExperimentConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Core(#[from] zebra_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("layer `{0}` is not gated")]
    LayerNotGated(String),
    #[error("config: {0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Image { .. } => 5,
            CliError::LayerNotGated(_) => 6,
            CliError::Core(e) => core_code(e),
            CliError::Train(e) => match e {
                TrainError::Core(e) => core_code(e),
                TrainError::Config(_) | TrainError::Unknown { .. } => 3,
                TrainError::Io { .. } => 4,
                TrainError::Data { .. } | TrainError::Dataset(_) => 5,
                TrainError::Topology(_) | TrainError::Unfolded | TrainError::Checkpoint(_) | TrainError::Pruning(_) => 6,
                TrainError::Divergence { .. } => 7,
            },
        }
    }
}

fn core_code(e: &zebra_core::Error) -> i32 {
    use zebra_core::Error as E;
    match e {
        E::InvalidConfig(_) => 3,
        E::Format(_) | E::Version(_) | E::Truncated { .. } | E::TrailingBytes(_) | E::Unrepresentable { .. } | E::NonFinite { .. } => 5,
        _ => 1,
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "zebra", version, about = "Zero-block activation gating toolkit", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F16,
    U8,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F16 => Dtype::F16,
            DtypeArg::U8 => Dtype::U8,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from an experiment config; writes metrics.jsonl and checkpoints.
    Train {
        config: PathBuf,
        /// Output directory (default: runs/<name>).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Use synthetic blobs when the CIFAR-10 directory is not configured.
        #[arg(long)]
        allow_synthetic: bool,
    },
    /// Evaluate a folded checkpoint on the test split described by a config.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Bits per activation element for the bandwidth figures.
        #[arg(long, default_value_t = 32)]
        bits: usize,
        #[arg(long)]
        allow_synthetic: bool,
    },
    /// Encode a raw activation map (u32 C,H,W little-endian, then f32 row-major) as ZBRA.
    Encode {
        raw_map: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        block_size: usize,
        /// Blocks whose maximum is <= threshold are zeroed.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        threshold: f32,
        #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
        dtype: DtypeArg,
    },
    /// Decode a ZBRA stream back into a raw activation map.
    Decode { input: PathBuf, out: PathBuf },
    /// Bandwidth table for an architecture config, experiment config or checkpoint.
    Report {
        source: PathBuf,
        /// Retained fraction of blocks, applied to every layer.
        #[arg(long, default_value_t = 1.0)]
        retained: f64,
        /// Bits per element (experiment configs and checkpoints).
        #[arg(long)]
        bits: Option<usize>,
        /// Also print one line per layer with the compute overhead ratio.
        #[arg(long)]
        per_layer: bool,
        /// Write the per-layer table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write one JSON record per layer.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Render zero-block overlays of an image for each gated layer.
    Viz {
        checkpoint: PathBuf,
        image: PathBuf,
        out_dir: PathBuf,
        /// Restrict to these layer ids (repeatable).
        #[arg(long = "layer")]
        layers: Vec<String>,
        /// Per-channel normalization mean (defaults to CIFAR-10 statistics).
        #[arg(long, num_args = 3)]
        mean: Option<Vec<f32>>,
        #[arg(long, num_args = 3)]
        std: Option<Vec<f32>>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, out_dir, epochs, allow_synthetic } => cmd_train(&config, out_dir, epochs, allow_synthetic),
        Command::Eval { checkpoint, config, bits, allow_synthetic } => cmd_eval(&checkpoint, &config, bits, allow_synthetic),
        Command::Encode { raw_map, out, block_size, threshold, dtype } => {
            cmd_encode(&raw_map, &out, block_size, threshold, dtype.into())
        }
        Command::Decode { input, out } => cmd_decode(&input, &out),
        Command::Report { source, retained, bits, per_layer, csv, jsonl } => {
            let out = std::io::stdout();
            report::cmd_report(&source, retained, bits, per_layer, csv.as_deref(), jsonl.as_deref(), &mut out.lock())
        }
        Command::Viz { checkpoint, image, out_dir, layers, mean, std } => {
            let mean = mean.map(|m| [m[0], m[1], m[2]]).unwrap_or(data::CIFAR_MEAN);
            let std = std.map(|s| [s[0], s[1], s[2]]).unwrap_or(data::CIFAR_STD);
            cmd_viz(&checkpoint, &image, &out_dir, &layers, mean, std).map(|_| ())
        }
    }
}

fn load_splits(cfg: &DataConfig, allow_synthetic: bool) -> Result<Splits, CliError> {
    if cfg.dataset == DatasetKind::Cifar10 && cfg.cifar_dir().is_none() && allow_synthetic {
        eprintln!("warning: no CIFAR-10 directory configured; using synthetic blobs of the same size");
        let synthetic = DataConfig { dataset: DatasetKind::Synthetic, ..cfg.clone() };
        return Ok(data::load(&synthetic)?);
    }
    Ok(data::load(cfg)?)
}

fn cmd_train(config: &Path, out_dir: Option<PathBuf>, epochs: Option<usize>, allow_synthetic: bool) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.validate()?;
    }
    let out_dir = out_dir.unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
    let splits = load_splits(&cfg.data, allow_synthetic)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(io(&metrics_path))?;
    let mut write_err = None;
    let outcome = train(&cfg, &splits, |m| {
        eprintln!(
            "{} {:?} epoch {:>3}: ce {:.4} reg {:.5} acc {:.3}/{:.3} zero {:.3} reduced {:.2}%",
            m.run, m.phase, m.epoch, m.ce_loss, m.reg_loss, m.train_accuracy, m.test_accuracy,
            m.mean_zero_block_fraction, m.reduced_bandwidth_percent
        );
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io(&metrics_path)(e));
    }
    outcome.checkpoint.save(&out_dir.join("checkpoint.safetensors"))?;
    outcome.folded.save(&out_dir.join("folded.safetensors"))?;
    let cfg_path = out_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io(&cfg_path))?;
    println!("{}", out_dir.display());
    Ok(())
}

#[derive(Debug, serde::Serialize)]
struct EvalSummary {
    accuracy: f64,
    mean_zero_block_fraction: f64,
    reduced_bandwidth_percent: f64,
    reduced_bandwidth_percent_with_overhead: f64,
    layers: Vec<zebra_train::harness::LayerZero>,
}

fn cmd_eval(checkpoint: &Path, config: &Path, bits: usize, allow_synthetic: bool) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let splits = load_splits(&cfg.data, allow_synthetic)?;
    let r = evaluate(&ck, &splits.test, bits)?;
    let summary = EvalSummary {
        accuracy: r.accuracy,
        mean_zero_block_fraction: r.mean_zero_block_fraction,
        reduced_bandwidth_percent: r.reduced_percent(),
        reduced_bandwidth_percent_with_overhead: r.reduced_percent_with_overhead(),
        layers: r.layers,
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialize"));
    Ok(())
}

fn cmd_encode(raw: &Path, out: &Path, block_size: usize, threshold: f32, dtype: Dtype) -> Result<(), CliError> {
    let bytes = fs::read(raw).map_err(io(raw))?;
    let map = codec::read_raw_map(&bytes, "raw")?;
    let layout = make_layout(map.height(), map.width(), block_size)?;
    let stats = block_max(&map, &layout)?;
    let mask = mask_from_thresholds(&stats, &vec![threshold; map.channels()])?;
    let encoded = codec::encode(&map, &mask, block_size, dtype)?;
    fs::write(out, &encoded).map_err(io(out))?;
    eprintln!("kept {}/{} blocks, {} bytes", mask.kept_count(), mask.len(), encoded.len());
    Ok(())
}

fn cmd_decode(input: &Path, out: &Path) -> Result<(), CliError> {
    let bytes = fs::read(input).map_err(io(input))?;
    let (map, _) = codec::decode(&bytes)?;
    fs::write(out, codec::write_raw_map(&map)).map_err(io(out))?;
    Ok(())
}

/// Box-downsamples an RGB image to `size x size` and normalizes it into a `[1, 3, size, size]` tensor.
pub fn image_to_input(img: &image::RgbImage, size: usize, mean: [f32; 3], std: [f32; 3]) -> Option<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h || w % size != 0 {
        return None;
    }
    let f = w / size;
    let mut t = Tensor::zeros(1, 3, size, size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let mut s = 0.0f32;
                for dy in 0..f {
                    for dx in 0..f {
                        s += img.get_pixel((x * f + dx) as u32, (y * f + dy) as u32).0[c] as f32;
                    }
                }
                let v = s / (f * f) as f32 / 255.0;
                t.data[(c * size + y) * size + x] = (v - mean[c]) / std[c];
            }
        }
    }
    Some(t)
}

/// Writes `<out_dir>/<layer>.png` for each selected layer and returns the paths.
pub fn cmd_viz(
    checkpoint: &Path,
    image_path: &Path,
    out_dir: &Path,
    layers: &[String],
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<Vec<PathBuf>, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut net = ck.to_network()?;
    if !net.is_folded() {
        return Err(TrainError::Unfolded.into());
    }
    let bytes = fs::read(image_path).map_err(io(image_path))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| CliError::Image { path: image_path.into(), message: e.to_string() })?
        .to_rgb8();
    let size = net.spec.input_size;
    let x = image_to_input(&img, size, mean, std).ok_or_else(|| CliError::Image {
        path: image_path.into(),
        message: format!("expected a square image whose side is a multiple of {size}, got {}x{}", img.width(), img.height()),
    })?;
    let gated: Vec<String> = net.gates().iter().map(|g| g.layer_id().to_string()).collect();
    for l in layers {
        if !gated.contains(l) {
            return Err(CliError::LayerNotGated(l.clone()));
        }
    }
    for g in net.gates_mut() {
        g.capture = Some(Default::default());
    }
    net.forward(&x, Mode::Eval);
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    for g in net.gates() {
        let id = g.layer_id();
        if !layers.is_empty() && !layers.iter().any(|l| l == id) {
            continue;
        }
        let mask = &g.capture.as_ref().expect("capture enabled").masks[0];
        let overlay = viz::render_overlay(&img, &viz::DarknessGrid::from_mask(mask));
        let path = out_dir.join(format!("{id}.png"));
        fs::write(&path, viz::encode_png(&overlay)).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
