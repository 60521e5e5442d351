//! Experiment orchestration: optional prune/slim pre-phase, Zebra training,
//! evaluation under folded gates, and zero-block recounts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zebra_core::bandwidth::{network_report, BandwidthReport, LayerSpec, Retention};
use zebra_core::blockgrid::block_max_raw;
use zebra_core::make_layout;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{Dataset, Splits};
use crate::error::{Result, TrainError};
use crate::gate::Capture;
use crate::layers::Mode;
use crate::loss::{argmax, softmax_cross_entropy};
use crate::network::{ModelSpec, Network};
use crate::optim::{OptimizerConfig, Sgd};
use crate::pruning::{apply_weight_pruning, prunable_gammas, rebuild_slimmed_model, slim_channels, PruneMethod};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Zebra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerZero {
    pub layer_id: String,
    pub kept: u64,
    pub total: u64,
    pub zero_fraction: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub run: String,
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f32,
    pub ce_loss: f64,
    pub reg_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Unweighted mean of the per-layer zero-block fractions.
    pub mean_zero_block_fraction: f64,
    pub layers: Vec<LayerZero>,
    /// Share of activation bits removed, index overhead not charged.
    pub reduced_bandwidth_percent: f64,
    pub reduced_bandwidth_percent_with_overhead: f64,
    pub max_threshold_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub layers: Vec<LayerZero>,
    pub mean_zero_block_fraction: f64,
    /// `None` for a gate-free network.
    pub report: Option<BandwidthReport>,
}

impl EvalResult {
    pub fn reduced_percent(&self) -> f64 {
        self.report.as_ref().map_or(0.0, |r| r.total.reduced_percent_without_overhead)
    }

    pub fn reduced_percent_with_overhead(&self) -> f64 {
        self.report.as_ref().map_or(0.0, |r| r.total.reduced_percent_with_overhead)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Trained network, threshold heads attached.
    pub network: Network,
    pub checkpoint: Checkpoint,
    /// Same weights with heads dropped and thresholds pinned to `t_obj`.
    pub folded: Checkpoint,
    pub metrics: Vec<TrainMetrics>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub ce_loss: f32,
    /// Batch mean of the per-image regularizer.
    pub reg_loss: f64,
    pub correct: usize,
}

/// Owns the network, optimizer state and shuffling RNG of one run.
pub struct Trainer {
    pub net: Network,
    pub optimizer: OptimizerConfig,
    pub lambda_ce: f32,
    pub l1_gamma: f32,
    pub rng: ChaCha8Rng,
    sgd: Sgd,
}

impl Trainer {
    pub fn new(net: Network, optimizer: OptimizerConfig, lambda_ce: f32, l1_gamma: f32, rng: ChaCha8Rng) -> Self {
        Self { net, optimizer, lambda_ce, l1_gamma, rng, sgd: Sgd::default() }
    }

    /// One SGD step on `λ·CE + reg` over a batch.
    pub fn step(&mut self, x: &Tensor, labels: &[u8], lr: f32) -> StepStats {
        let classes = self.net.spec.num_classes;
        self.net.zero_grad();
        let logits = self.net.forward(x, Mode::Train);
        let (ce, mut grad) = softmax_cross_entropy(&logits, labels, classes);
        for g in &mut grad {
            *g *= self.lambda_ce;
        }
        let reg = self.net.gates().iter().map(|g| g.last_reg).sum::<f64>() / labels.len() as f64;
        self.net.backward(&grad);
        self.sgd.step(&mut self.net, &self.optimizer, lr, self.l1_gamma);
        let correct = logits.chunks(classes).zip(labels).filter(|(row, &l)| argmax(row) == l as usize).count();
        StepStats { ce_loss: ce, reg_loss: reg, correct }
    }

    /// One pass over `data` in a seeded shuffled order. Returns mean CE, mean
    /// regularizer and training accuracy.
    pub fn epoch(&mut self, data: &Dataset, lr: f32, epoch: usize) -> Result<(f64, f64, f64)> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut ce, mut reg, mut correct, mut steps) = (0.0f64, 0.0f64, 0usize, 0usize);
        for (step, idx) in order.chunks(self.optimizer.batch_size).enumerate() {
            let (x, y) = data.batch(idx);
            let s = self.step(&x, &y, lr);
            if !s.ce_loss.is_finite() || !s.reg_loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    step,
                    detail: format!("ce_loss = {}, reg_loss = {} at lr {lr}", s.ce_loss, s.reg_loss),
                });
            }
            ce += s.ce_loss as f64;
            reg += s.reg_loss;
            correct += s.correct;
            steps += 1;
        }
        Ok((ce / steps as f64, reg / steps as f64, correct as f64 / data.len() as f64))
    }
}

/// Runs `net` over `data` in eval mode; returns accuracy and per-gate counts.
fn eval_pass(net: &mut Network, data: &Dataset) -> (f64, Vec<LayerZero>) {
    for g in net.gates_mut() {
        g.reset_stats();
    }
    let classes = net.spec.num_classes;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = net.forward(&x, Mode::Eval);
        correct += logits.chunks(classes).zip(&y).filter(|(row, &l)| argmax(row) == l as usize).count();
    }
    let layers = net
        .gates()
        .iter()
        .map(|g| LayerZero {
            layer_id: g.layer_id().to_string(),
            kept: g.counts.kept,
            total: g.counts.total,
            zero_fraction: g.counts.zero_fraction(),
        })
        .collect();
    (correct as f64 / data.len().max(1) as f64, layers)
}

/// Bandwidth report from per-layer kept/total block counts.
pub fn report_from_counts(specs: &[LayerSpec], layers: &[LayerZero]) -> Result<BandwidthReport> {
    let retention: Vec<Retention> = layers
        .iter()
        .map(|l| Retention::Fraction(if l.total == 0 { 1.0 } else { l.kept as f64 / l.total as f64 }))
        .collect();
    Ok(network_report(specs, &retention)?)
}

fn mean_fraction(layers: &[LayerZero]) -> f64 {
    if layers.is_empty() {
        0.0
    } else {
        layers.iter().map(|l| l.zero_fraction).sum::<f64>() / layers.len() as f64
    }
}

/// Accuracy, zero-block fractions and bandwidth of a folded (or gate-free) network.
pub fn evaluate_network(net: &mut Network, data: &Dataset, bits: usize) -> Result<EvalResult> {
    if net.is_gated() && !net.is_folded() {
        return Err(TrainError::Unfolded);
    }
    let (accuracy, layers) = eval_pass(net, data);
    let report = if net.is_gated() { Some(report_from_counts(&net.gated_layer_specs(bits), &layers)?) } else { None };
    Ok(EvalResult { accuracy, mean_zero_block_fraction: mean_fraction(&layers), layers, report })
}

pub fn evaluate(checkpoint: &Checkpoint, data: &Dataset, bits: usize) -> Result<EvalResult> {
    if checkpoint.gated && !checkpoint.folded {
        return Err(TrainError::Unfolded);
    }
    evaluate_network(&mut checkpoint.to_network()?, data, bits)
}

/// Largest `|T - t_obj|` the (unfolded) heads produce over `data`.
pub fn threshold_deviation(net: &mut Network, data: &Dataset) -> f64 {
    if !net.is_gated() || net.is_folded() {
        return 0.0;
    }
    eval_pass(net, data);
    net.gates().iter().map(|g| g.max_deviation as f64).fold(0.0, f64::max)
}

fn folded_copy(net: &Network, cfg: &ExperimentConfig) -> Network {
    let mut folded = net.clone();
    if folded.is_gated() {
        folded.fold(&cfg.zebra);
    }
    folded
}

fn epoch_metrics(
    cfg: &ExperimentConfig,
    net: &Network,
    test: &Dataset,
    phase: Phase,
    epoch: usize,
    lr: f32,
    (ce, reg, train_acc): (f64, f64, f64),
) -> Result<TrainMetrics> {
    let eval = evaluate_network(&mut folded_copy(net, cfg), test, cfg.bits)?;
    let deviation = threshold_deviation(&mut net.clone(), test);
    Ok(TrainMetrics {
        run: cfg.name.clone(),
        phase,
        epoch,
        lr,
        ce_loss: ce,
        reg_loss: reg,
        train_accuracy: train_acc,
        test_accuracy: eval.accuracy,
        mean_zero_block_fraction: eval.mean_zero_block_fraction,
        reduced_bandwidth_percent: eval.reduced_percent(),
        reduced_bandwidth_percent_with_overhead: eval.reduced_percent_with_overhead(),
        layers: eval.layers,
        max_threshold_deviation: deviation,
    })
}

/// Copies every tensor and pruning mask `to` shares by name with `from`.
pub fn copy_weights(from: &mut Network, to: &mut Network) {
    let mut tensors: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    from.visit_state(&mut |name, _, data| {
        tensors.insert(name.to_string(), data.clone());
    });
    let mut masks: BTreeMap<String, Option<Vec<bool>>> = BTreeMap::new();
    from.visit_masks(&mut |name, m| {
        masks.insert(name.to_string(), m.clone());
    });
    to.visit_state(&mut |name, _, data| {
        if let Some(v) = tensors.get(name) {
            if v.len() == data.len() {
                data.copy_from_slice(v);
            }
        }
    });
    to.visit_masks(&mut |name, m| {
        if let Some(v) = masks.get(name) {
            m.clone_from(v);
        }
    });
}

/// Builds the configured (gated or control) model with weights drawn from `rng`.
pub fn build_model(cfg: &ExperimentConfig, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Network> {
    let spec = ModelSpec::for_arch(cfg.model, cfg.data.image_size, num_classes);
    Network::new(spec, cfg.gated.then_some(&cfg.zebra), rng)
}

/// Full run: optional plain pretraining and pruning/slimming, then Zebra
/// training. `on_epoch` sees each metrics record as it is produced.
pub fn train(cfg: &ExperimentConfig, splits: &Splits, mut on_epoch: impl FnMut(&TrainMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = splits.train.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    let net = match &cfg.prune {
        None => build_model(cfg, classes, &mut rng)?,
        Some(prune) => {
            let spec = ModelSpec::for_arch(cfg.model, cfg.data.image_size, classes);
            let base = Network::new(spec, None, &mut rng)?;
            let l1 = if prune.method == PruneMethod::NetworkSlimming { prune.l1_coefficient } else { 0.0 };
            let mut t = Trainer::new(base, cfg.optimizer.clone(), 1.0, l1, rng);
            for e in 0..prune.pretrain_epochs {
                let lr = cfg.optimizer.lr_at(e, prune.pretrain_epochs);
                let stats = t.epoch(&splits.train, lr, e)?;
                let m = epoch_metrics(cfg, &t.net, &splits.test, Phase::Pretrain, e, lr, stats)?;
                on_epoch(&m);
                metrics.push(m);
            }
            let mut base = t.net;
            rng = t.rng;
            match prune.method {
                PruneMethod::WeightPruning => apply_weight_pruning(&mut base, prune.ratio)?,
                PruneMethod::NetworkSlimming => {
                    let mask = slim_channels(&prunable_gammas(&base), prune.ratio)?;
                    base = rebuild_slimmed_model(&base, &mask)?;
                }
            }
            let mut net = Network::new(base.spec.clone(), cfg.gated.then_some(&cfg.zebra), &mut rng)?;
            copy_weights(&mut base, &mut net);
            net
        }
    };
    let mut trainer = Trainer::new(net, cfg.optimizer.clone(), cfg.zebra.lambda_ce, 0.0, rng);
    for e in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(e, cfg.epochs);
        let stats = trainer.epoch(&splits.train, lr, e)?;
        let m = epoch_metrics(cfg, &trainer.net, &splits.test, Phase::Zebra, e, lr, stats)?;
        on_epoch(&m);
        metrics.push(m);
    }
    let network = trainer.net;
    let mut checkpoint = Checkpoint::from_network(&network, &cfg.zebra);
    checkpoint.extra.insert("run".into(), cfg.name.clone());
    checkpoint.extra.insert("seed".into(), cfg.seed.to_string());
    checkpoint.extra.insert("data_source".into(), splits.source.clone());
    let mut folded = Checkpoint::from_network(&folded_copy(&network, cfg), &cfg.zebra);
    folded.extra = checkpoint.extra.clone();
    Ok(TrainOutcome { network, checkpoint, folded, metrics })
}

/// Block size for a zero-block recount.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecountBlock {
    Size(usize),
    WholeMap,
}

impl std::fmt::Display for RecountBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RecountBlock::Size(b) => write!(f, "block {b}"),
            RecountBlock::WholeMap => write!(f, "whole map"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recount {
    pub block: RecountBlock,
    /// `(layer_id, zero blocks, total blocks)`.
    pub layers: Vec<(String, u64, u64)>,
}

impl Recount {
    pub fn fraction(&self) -> f64 {
        let (z, t) = self.layers.iter().fold((0u64, 0u64), |(z, t), l| (z + l.1, t + l.2));
        if t == 0 {
            0.0
        } else {
            z as f64 / t as f64
        }
    }

    pub fn layer_fraction(&self, i: usize) -> f64 {
        let (_, z, t) = &self.layers[i];
        *z as f64 / (*t).max(1) as f64
    }
}

/// Counts all-zero blocks of every gate's output at several block sizes, on
/// the same activations (one eval pass over `data`).
pub fn zero_block_recount(net: &mut Network, data: &Dataset, blocks: &[RecountBlock]) -> Result<Vec<Recount>> {
    for g in net.gates_mut() {
        g.capture = Some(Capture::default());
    }
    eval_pass(net, data);
    let captures: Vec<(String, Capture)> = net
        .gates_mut()
        .into_iter()
        .map(|g| (g.layer_id().to_string(), g.capture.take().unwrap_or_default()))
        .collect();
    let mut out = Vec::with_capacity(blocks.len());
    for &block in blocks {
        let mut layers = Vec::with_capacity(captures.len());
        for (id, cap) in &captures {
            let (mut zero, mut total) = (0u64, 0u64);
            for t in &cap.outputs {
                let size = match block {
                    RecountBlock::Size(b) => b,
                    RecountBlock::WholeMap => t.h.max(t.w),
                };
                let layout = make_layout(t.h, t.w, size)?;
                for n in 0..t.n {
                    let stats = block_max_raw(t.sample(n), t.c, &layout);
                    zero += stats.max_values.iter().filter(|&&m| m <= 0.0).count() as u64;
                    total += stats.max_values.len() as u64;
                }
            }
            layers.push((id.clone(), zero, total));
        }
        out.push(Recount { block, layers });
    }
    Ok(out)
}
