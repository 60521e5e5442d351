//! Static pruning composed with Zebra: magnitude weight pruning and
//! batch-norm-scale channel slimming.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    WeightPruning,
    NetworkSlimming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub method: PruneMethod,
    /// Fraction removed: weights per layer, or channels globally.
    pub ratio: f64,
    #[serde(default)]
    pub l1_coefficient: f32,
    /// Epochs of plain (gate-free) training before pruning.
    #[serde(default = "default_pretrain")]
    pub pretrain_epochs: usize,
}

fn default_pretrain() -> usize {
    10
}

impl PruneSpec {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if self.l1_coefficient < 0.0 {
            return Err(TrainError::Config("prune: l1_coefficient must be >= 0".into()));
        }
        if self.method == PruneMethod::WeightPruning && self.l1_coefficient != 0.0 {
            return Err(TrainError::Config("prune: l1_coefficient applies only to network_slimming".into()));
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(TrainError::Pruning(format!("ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Kept channels per prunable batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub keep_per_layer: BTreeMap<String, Vec<bool>>,
}

impl ChannelMask {
    pub fn removed(&self) -> usize {
        self.keep_per_layer.values().flatten().filter(|&&k| !k).count()
    }

    pub fn total(&self) -> usize {
        self.keep_per_layer.values().map(Vec::len).sum()
    }
}

/// Per layer, masks the `floor(ratio · N)` smallest-|w| weights (ties by index).
pub fn magnitude_prune(weights: &[Vec<f32>], ratio: f64) -> Result<Vec<Vec<bool>>> {
    check_ratio(ratio)?;
    Ok(weights
        .iter()
        .map(|w| {
            let k = (ratio * w.len() as f64).floor() as usize;
            let mut order: Vec<usize> = (0..w.len()).collect();
            order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
            let mut mask = vec![true; w.len()];
            for &i in &order[..k] {
                mask[i] = false;
            }
            mask
        })
        .collect())
}

/// `coefficient · Σ|γ|`.
pub fn bn_l1_penalty(gammas: &[Vec<f32>], coefficient: f32) -> f32 {
    coefficient * gammas.iter().flatten().map(|g| g.abs()).sum::<f32>()
}

/// Removes the globally smallest-|γ| `floor(ratio · N)` channels (ties by
/// layer, then channel). Any layer left empty gets its largest channel back.
pub fn slim_channels(gammas: &[(String, Vec<f32>)], ratio: f64) -> Result<ChannelMask> {
    check_ratio(ratio)?;
    let mut all: Vec<(f32, usize, usize)> = Vec::new();
    for (l, (_, g)) in gammas.iter().enumerate() {
        all.extend(g.iter().enumerate().map(|(c, v)| (v.abs(), l, c)));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let k = (ratio * all.len() as f64).floor() as usize;
    let mut keep: Vec<Vec<bool>> = gammas.iter().map(|(_, g)| vec![true; g.len()]).collect();
    for &(_, l, c) in &all[..k] {
        keep[l][c] = false;
    }
    for (l, (_, g)) in gammas.iter().enumerate() {
        if !keep[l].iter().any(|&x| x) {
            let best = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()).then(b.cmp(&a)));
            if let Some(best) = best {
                keep[l][best] = true;
            }
        }
    }
    Ok(ChannelMask {
        keep_per_layer: gammas.iter().map(|(n, _)| n.clone()).zip(keep).collect(),
    })
}

/// γ of every slimmable batch norm, in forward order.
pub fn prunable_gammas(net: &Network) -> Vec<(String, Vec<f32>)> {
    net.prunable_bns().iter().map(|b| (b.name.clone(), b.gamma.clone())).collect()
}

/// Rebuilds `net` without the channels `mask` drops.
pub fn rebuild_slimmed_model(net: &Network, mask: &ChannelMask) -> Result<Network> {
    net.rebuild_slimmed(&mask.keep_per_layer)
}

/// Masks and zeroes the smallest weights of every conv and the classifier,
/// freezing them for the rest of training.
pub fn apply_weight_pruning(net: &mut Network, ratio: f64) -> Result<()> {
    let mut names = Vec::new();
    let mut weights = Vec::new();
    net.visit_params(&mut |p| {
        if p.kind.is_prunable_weight() {
            names.push(p.name.clone());
            weights.push(p.value.to_vec());
        }
    });
    let masks = magnitude_prune(&weights, ratio)?;
    let by_name: BTreeMap<&str, &Vec<bool>> = names.iter().map(String::as_str).zip(&masks).collect();
    net.visit_masks(&mut |name, slot| {
        if let Some(m) = by_name.get(name) {
            *slot = Some((*m).clone());
        }
    });
    net.visit_params(&mut |p| {
        if let Some(mask) = p.mask {
            for (w, &k) in p.value.iter_mut().zip(mask) {
                if !k {
                    *w = 0.0;
                }
            }
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude_prune(&[vec![0.1, -0.4, 0.3, -0.05]], 0.5).unwrap(), vec![vec![false, true, true, false]]);
        assert_eq!(magnitude_prune(&[vec![1.0, 2.0]], 0.0).unwrap(), vec![vec![true, true]]);
        assert!(magnitude_prune(&[vec![1.0]], 1.0).is_err());
    }

    #[test]
    fn l1_penalty_by_hand() {
        assert_eq!(bn_l1_penalty(&[vec![0.5, -0.25]], 1.0), 0.75);
        assert_eq!(bn_l1_penalty(&[vec![0.5, -0.25]], 0.0), 0.0);
        assert_eq!(bn_l1_penalty(&[vec![0.5], vec![-0.25]], 2.0), 1.5);
    }

    #[test]
    fn slimming_global_cut() {
        let g = vec![("A".to_string(), vec![0.9, 0.01]), ("B".to_string(), vec![0.5, 0.02])];
        let m = slim_channels(&g, 0.5).unwrap();
        assert_eq!(m.keep_per_layer["A"], vec![true, false]);
        assert_eq!(m.keep_per_layer["B"], vec![true, false]);
        assert_eq!(slim_channels(&g, 0.0).unwrap().removed(), 0);
    }

    #[test]
    fn slimming_keeps_one_channel_per_layer() {
        let g = vec![("A".to_string(), vec![0.01, 0.02]), ("B".to_string(), vec![0.5, 0.6, 0.7])];
        let m = slim_channels(&g, 0.4).unwrap();
        assert_eq!(m.keep_per_layer["A"], vec![false, true]);
    }

    proptest! {
        #[test]
        fn magnitude_masks_ignore_sign(w in proptest::collection::vec(-1.0f32..1.0, 1..200), r in 0.0f64..0.99) {
            let flipped: Vec<f32> = w.iter().enumerate().map(|(i, v)| if i % 2 == 0 { -v } else { *v }).collect();
            prop_assert_eq!(magnitude_prune(&[w.clone()], r).unwrap(), magnitude_prune(&[flipped], r).unwrap());
        }

        #[test]
        fn magnitude_count_matches_sort_oracle(w in proptest::collection::vec(-1.0f32..1.0, 1..300), r in 0.0f64..0.99) {
            let mask = &magnitude_prune(&[w.clone()], r).unwrap()[0];
            let k = (r * w.len() as f64).floor() as usize;
            prop_assert_eq!(mask.iter().filter(|&&m| !m).count(), k);
            let mut mags: Vec<f32> = w.iter().map(|v| v.abs()).collect();
            mags.sort_by(f32::total_cmp);
            if k > 0 && k < w.len() {
                let cutoff = mags[k - 1];
                for (v, &m) in w.iter().zip(mask) {
                    if v.abs() < cutoff { prop_assert!(!m); }
                    if v.abs() > cutoff { prop_assert!(m); }
                }
            }
        }

        #[test]
        fn slimming_removes_globally_smallest(
            layers in proptest::collection::vec(proptest::collection::vec(0.0f32..1.0, 2..12), 1..5),
            r in 0.0f64..0.9,
        ) {
            let g: Vec<(String, Vec<f32>)> = layers.iter().enumerate().map(|(i, v)| (format!("l{i}"), v.clone())).collect();
            let m = slim_channels(&g, r).unwrap();
            let total: usize = layers.iter().map(Vec::len).sum();
            let k = (r * total as f64).floor() as usize;
            let removed = m.removed();
            prop_assert!(removed <= k);
            for (name, keep) in &m.keep_per_layer {
                prop_assert!(keep.iter().any(|&x| x), "{} emptied", name);
            }
            if removed == k {
                let mut all: Vec<f32> = layers.iter().flatten().copied().collect();
                all.sort_by(f32::total_cmp);
                let max_removed = g.iter().flat_map(|(n, v)| v.iter().zip(&m.keep_per_layer[n]).filter(|(_, &k)| !k).map(|(x, _)| *x))
                    .fold(f32::NEG_INFINITY, f32::max);
                let min_kept = g.iter().flat_map(|(n, v)| v.iter().zip(&m.keep_per_layer[n]).filter(|(_, &k)| k).map(|(x, _)| *x))
                    .fold(f32::INFINITY, f32::min);
                prop_assert!(max_removed <= min_kept);
            }
        }
    }
}
