use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::layers::ParamKind;
use crate::network::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub initial_lr: f32,
    /// Epochs at which the rate is multiplied by `decay_factor`.
    /// Empty means 50% and 75% of the run.
    #[serde(default)]
    pub decay_milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f32 {
    0.1
}
fn default_decay() -> f32 {
    0.1
}
fn default_wd() -> f32 {
    5e-4
}
fn default_momentum() -> f32 {
    0.9
}
fn default_batch() -> usize {
    64
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            initial_lr: default_lr(),
            decay_milestones: Vec::new(),
            decay_factor: default_decay(),
            weight_decay: default_wd(),
            momentum: default_momentum(),
            batch_size: default_batch(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(format!("optimizer: {m}")));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay_factor must lie in (0, 1) so the schedule strictly decreases");
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_milestones must be strictly increasing");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn milestones(&self, epochs: usize) -> Vec<usize> {
        if self.decay_milestones.is_empty() {
            vec![epochs / 2, epochs * 3 / 4]
        } else {
            self.decay_milestones.clone()
        }
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f32 {
        let drops = self.milestones(epochs).iter().filter(|&&m| m > 0 && epoch >= m).count();
        self.initial_lr * self.decay_factor.powi(drops as i32)
    }
}

/// SGD with momentum and decoupled-from-heads weight decay. Pruned weights
/// (mask `false`) are pinned at exactly zero after every step.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    /// `l1_gamma` adds the sparsity subgradient `l1 · sign(γ)` to every BN scale.
    pub fn step(&mut self, net: &mut Network, cfg: &OptimizerConfig, lr: f32, l1_gamma: f32) {
        let mut i = 0;
        let velocity = &mut self.velocity;
        net.visit_params(&mut |p| {
            if velocity.len() <= i {
                velocity.push(vec![0.0; p.value.len()]);
            }
            let v = &mut velocity[i];
            if v.len() != p.value.len() {
                *v = vec![0.0; p.value.len()];
            }
            let wd = if p.kind.is_head() { 0.0 } else { cfg.weight_decay };
            let l1 = if p.kind == ParamKind::BnGamma { l1_gamma } else { 0.0 };
            for ((w, g), vel) in p.value.iter_mut().zip(p.grad.iter()).zip(v.iter_mut()) {
                let mut d = g + wd * *w;
                if l1 != 0.0 && *w != 0.0 {
                    d += l1 * w.signum();
                }
                *vel = cfg.momentum * *vel + d;
                *w -= lr * *vel;
            }
            if let Some(mask) = p.mask {
                for ((w, vel), &keep) in p.value.iter_mut().zip(v.iter_mut()).zip(mask) {
                    if !keep {
                        *w = 0.0;
                        *vel = 0.0;
                    }
                }
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_steps_down_twice() {
        let cfg = OptimizerConfig::default();
        let lrs: Vec<f32> = (0..8).map(|e| cfg.lr_at(e, 8)).collect();
        assert_eq!(lrs[0], 0.1);
        assert!((lrs[4] - 0.01).abs() < 1e-7);
        assert!((lrs[6] - 0.001).abs() < 1e-7);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_non_decreasing_schedules() {
        assert!(OptimizerConfig { decay_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { decay_milestones: vec![5, 5], ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
