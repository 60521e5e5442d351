//! Zero-block gating with learned per-channel thresholds.
//!
//! During training each gated layer owns a [`ThresholdHead`]: global average
//! pooling of the activation map followed by a `C x C` affine map, giving one
//! threshold per channel. Thresholds are pulled toward `t_obj` by the squared
//! error regularizer. At inference the heads are dropped and every threshold
//! is replaced by `t_obj` ([`fold_for_inference`]).

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::blockgrid::{block_max_raw, make_layout, mask_from_thresholds, zero_masked_blocks, BlockGridLayout, BlockMask};
use crate::error::{Error, Result};
use crate::map::ActivationMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Binary block gate; thresholds receive no gradient through it.
    #[default]
    Hard,
    /// Each block is scaled by `sigmoid((max - T) / temperature)`.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZebraConfig {
    pub block_size: usize,
    pub t_obj: f32,
    #[serde(default = "default_lambda")]
    pub lambda_ce: f32,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default = "default_temperature")]
    pub soft_temperature: f32,
}

fn default_lambda() -> f32 {
    1.0
}

fn default_temperature() -> f32 {
    0.05
}

impl ZebraConfig {
    pub fn hard(block_size: usize, t_obj: f32) -> Self {
        Self {
            block_size,
            t_obj,
            lambda_ce: default_lambda(),
            gate_mode: GateMode::Hard,
            soft_temperature: default_temperature(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be >= 1".into()));
        }
        if !(self.t_obj >= 0.0 && self.t_obj.is_finite()) {
            return Err(Error::InvalidConfig(format!("t_obj must be finite and >= 0, got {}", self.t_obj)));
        }
        if !(self.lambda_ce > 0.0 && self.lambda_ce.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_ce must be > 0, got {}", self.lambda_ce)));
        }
        if !(self.soft_temperature > 0.0 && self.soft_temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "soft_temperature must be > 0, got {}",
                self.soft_temperature
            )));
        }
        Ok(())
    }
}

/// Global-average-pool + fully-connected threshold predictor for one layer.
///
/// `weights` is row-major `[C, C]`: `T[c] = sum_k weights[c * C + k] * gap[k] + bias[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdHead<T = f32> {
    pub layer_id: String,
    pub channels: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients of a [`ThresholdHead`] plus the gradient w.r.t. its pooled input.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub pooled: Vec<T>,
}

impl<T: Float> ThresholdHead<T> {
    /// Zero weights and bias `t_obj`: the head starts at the regularizer's minimum.
    pub fn at_target(layer_id: impl Into<String>, channels: usize, t_obj: T) -> Self {
        Self {
            layer_id: layer_id.into(),
            channels,
            weights: vec![T::zero(); channels * channels],
            bias: vec![t_obj; channels],
        }
    }

    pub fn from_parts(layer_id: impl Into<String>, channels: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != channels * channels {
            return Err(Error::LengthMismatch { expected: channels * channels, actual: weights.len() });
        }
        if bias.len() != channels {
            return Err(Error::LengthMismatch { expected: channels, actual: bias.len() });
        }
        Ok(Self { layer_id: layer_id.into(), channels, weights, bias })
    }

    pub fn cast<U: Float>(&self) -> ThresholdHead<U> {
        let conv = |v: &T| U::from(*v).expect("float cast");
        ThresholdHead {
            layer_id: self.layer_id.clone(),
            channels: self.channels,
            weights: self.weights.iter().map(conv).collect(),
            bias: self.bias.iter().map(conv).collect(),
        }
    }

    pub fn forward_pooled(&self, pooled: &[T]) -> Result<Vec<T>> {
        if pooled.len() != self.channels {
            return Err(Error::LengthMismatch { expected: self.channels, actual: pooled.len() });
        }
        Ok(self
            .weights
            .chunks_exact(self.channels)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(pooled).fold(b, |acc, (&w, &p)| acc + w * p))
            .collect())
    }

    /// Backpropagates `grad_thresholds` through the affine map.
    pub fn backward_pooled(&self, pooled: &[T], grad_thresholds: &[T]) -> HeadGrads<T> {
        let c = self.channels;
        let mut weights = vec![T::zero(); c * c];
        let mut grad_pooled = vec![T::zero(); c];
        for (row, &g) in grad_thresholds.iter().enumerate() {
            for k in 0..c {
                weights[row * c + k] = g * pooled[k];
                grad_pooled[k] = grad_pooled[k] + g * self.weights[row * c + k];
            }
        }
        HeadGrads { weights, bias: grad_thresholds.to_vec(), pooled: grad_pooled }
    }
}

/// Per-channel spatial mean.
pub fn global_average_pool<T: Float>(map: &ActivationMap) -> Vec<T> {
    global_average_pool_raw(map.data(), map.channels())
}

pub fn global_average_pool_raw<T: Float>(data: &[f32], channels: usize) -> Vec<T> {
    let plane = data.len() / channels;
    let n = T::from(plane).expect("plane size");
    data.chunks_exact(plane)
        .map(|ch| ch.iter().fold(T::zero(), |acc, &v| acc + T::from(v).expect("f32 cast")) / n)
        .collect()
}

/// `fc_weights · gap(map) + fc_bias`: one threshold per channel.
pub fn threshold_head_forward<T: Float>(map: &ActivationMap, head: &ThresholdHead<T>) -> Result<Vec<T>> {
    if map.channels() != head.channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", head.channels),
            actual: format!("{} channels", map.channels()),
        });
    }
    head.forward_pooled(&global_average_pool(map))
}

/// What a gate forward pass needs to remember for its backward pass.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub layout: BlockGridLayout,
    pub mask: BlockMask,
    mode: GateMode,
    temperature: f32,
    /// Soft mode only: per-block sigmoid factor.
    factors: Vec<f32>,
    /// Soft mode only: flat index of the first maximum in each block.
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GateOutput {
    pub map: ActivationMap,
    pub mask: BlockMask,
    pub trace: GateTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub input: Vec<f32>,
    pub thresholds: Vec<f32>,
}

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn zebra_gate(map: &ActivationMap, thresholds: &[f32], cfg: &ZebraConfig) -> Result<GateOutput> {
    let layout = make_layout(map.height(), map.width(), cfg.block_size)?;
    let mut data = map.data().to_vec();
    let trace = gate_in_place(&mut data, map.channels(), &layout, thresholds, cfg.gate_mode, cfg.soft_temperature)?;
    Ok(GateOutput { map: map.with_data(data), mask: trace.mask.clone(), trace })
}

/// Gates a raw `[C, H, W]` buffer in place and returns the backward trace.
pub fn gate_in_place(
    data: &mut [f32],
    channels: usize,
    layout: &BlockGridLayout,
    thresholds: &[f32],
    mode: GateMode,
    temperature: f32,
) -> Result<GateTrace> {
    if data.len() != channels * layout.height * layout.width {
        return Err(Error::LengthMismatch { expected: channels * layout.height * layout.width, actual: data.len() });
    }
    let stats = block_max_raw(data, channels, layout);
    let mask = mask_from_thresholds(&stats, thresholds)?;
    match mode {
        GateMode::Hard => {
            zero_masked_blocks(data, &mask, layout);
            Ok(GateTrace { layout: *layout, mask, mode, temperature, factors: Vec::new(), argmax: Vec::new() })
        }
        GateMode::Soft => {
            let per_channel = layout.blocks_per_channel();
            let factors: Vec<f32> = stats
                .max_values
                .iter()
                .enumerate()
                .map(|(b, &m)| sigmoid((m - thresholds[b / per_channel]) / temperature))
                .collect();
            let mut argmax = vec![usize::MAX; factors.len()];
            for_each_block(channels, layout, |b, idx| {
                if argmax[b] == usize::MAX && data[idx] == stats.max_values[b] {
                    argmax[b] = idx;
                }
            });
            for_each_block(channels, layout, |b, idx| data[idx] *= factors[b]);
            Ok(GateTrace { layout: *layout, mask, mode, temperature, factors, argmax })
        }
    }
}

/// Visits every element as `(block index, flat element index)` in raster order.
fn for_each_block(channels: usize, layout: &BlockGridLayout, mut f: impl FnMut(usize, usize)) {
    let s = layout.effective_block_size;
    for c in 0..channels {
        for y in 0..layout.height {
            let row_block = (c * layout.blocks_h + y / s) * layout.blocks_w;
            let row_start = (c * layout.height + y) * layout.width;
            for x in 0..layout.width {
                f(row_block + x / s, row_start + x);
            }
        }
    }
}

impl GateTrace {
    pub fn mode(&self) -> GateMode {
        self.mode
    }

    /// `input` is the pre-gate buffer the trace was produced from.
    pub fn backward(&self, input: &[f32], grad_out: &[f32]) -> GateGrads {
        let channels = self.mask.channels;
        let mut grad_in = grad_out.to_vec();
        let mut grad_t = vec![0.0f32; channels];
        match self.mode {
            GateMode::Hard => zero_masked_blocks(&mut grad_in, &self.mask, &self.layout),
            GateMode::Soft => {
                let mut dot = vec![0.0f32; self.factors.len()];
                for_each_block(channels, &self.layout, |b, idx| {
                    dot[b] += grad_out[idx] * input[idx];
                    grad_in[idx] *= self.factors[b];
                });
                let per_channel = self.layout.blocks_per_channel();
                for (b, (&g, &d)) in self.factors.iter().zip(&dot).enumerate() {
                    let dz = d * g * (1.0 - g) / self.temperature;
                    grad_in[self.argmax[b]] += dz;
                    grad_t[b / per_channel] -= dz;
                }
            }
        }
        GateGrads { input: grad_in, thresholds: grad_t }
    }
}

/// `sum_{l,c} (t_obj - T[l][c])^2`.
pub fn regularization_loss<T: Float>(all_thresholds: &[Vec<T>], t_obj: T) -> T {
    all_thresholds
        .iter()
        .flat_map(|layer| layer.iter())
        .fold(T::zero(), |acc, &t| acc + (t_obj - t) * (t_obj - t))
}

/// Gradient of [`regularization_loss`] w.r.t. one layer's thresholds.
pub fn regularization_grad<T: Float>(thresholds: &[T], t_obj: T) -> Vec<T> {
    let two = T::one() + T::one();
    thresholds.iter().map(|&t| two * (t - t_obj)).collect()
}

/// `lambda · ce + reg`.
pub fn total_loss(ce_loss: f32, reg_loss: f32, cfg: &ZebraConfig) -> f32 {
    cfg.lambda_ce * ce_loss + reg_loss
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZebraLayerState {
    pub layer_id: String,
    pub thresholds: Vec<f32>,
    pub last_mask: Option<BlockMask>,
    pub mode: LayerMode,
    pub head: Option<ThresholdHead<f32>>,
}

impl ZebraLayerState {
    pub fn training(head: ThresholdHead<f32>) -> Self {
        Self {
            layer_id: head.layer_id.clone(),
            thresholds: head.bias.clone(),
            last_mask: None,
            mode: LayerMode::Training,
            head: Some(head),
        }
    }

    pub fn channels(&self) -> usize {
        self.thresholds.len()
    }

    /// Thresholds to use on `map`: the head's prediction while training, the
    /// folded constants at inference.
    pub fn thresholds_for(&mut self, map: &ActivationMap) -> Result<&[f32]> {
        if let (LayerMode::Training, Some(head)) = (self.mode, &self.head) {
            self.thresholds = threshold_head_forward(map, head)?;
        }
        Ok(&self.thresholds)
    }
}

/// Drops every threshold head and pins all thresholds to `t_obj`.
pub fn fold_for_inference(states: Vec<ZebraLayerState>, cfg: &ZebraConfig) -> Vec<ZebraLayerState> {
    states
        .into_iter()
        .map(|s| ZebraLayerState {
            thresholds: vec![cfg.t_obj; s.channels()],
            head: None,
            mode: LayerMode::Inference,
            ..s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockgrid::{apply_mask, block_max};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ActivationMap {
        let data = (0..c * h * w)
            .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0f32..1.0) })
            .collect();
        ActivationMap::new(data, c, h, w, "t").unwrap()
    }

    #[test]
    fn head_bias_passthrough_and_gap_of_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_map(&mut rng, 2, 4, 4);
        let head = ThresholdHead::from_parts("l", 2, vec![0.0; 4], vec![0.5, 0.5]).unwrap();
        assert_eq!(threshold_head_forward(&map, &head).unwrap(), vec![0.5, 0.5]);

        let identity = ThresholdHead::from_parts("l", 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.0; 3])
            .unwrap();
        let constant = ActivationMap::filled(0.2, 3, 4, 4, "c").unwrap();
        for t in threshold_head_forward(&constant, &identity).unwrap() {
            assert!((t - 0.2f32).abs() < 1e-6);
        }
    }

    #[test]
    fn head_matches_hand_rolled_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_map(&mut rng, 4, 8, 8);
        let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let head = ThresholdHead::from_parts("l", 4, w.clone(), b.clone()).unwrap();
        let got = threshold_head_forward(&map, &head).unwrap();

        let mut gap = [0.0f64; 4];
        for (c, g) in gap.iter_mut().enumerate() {
            for y in 0..8 {
                for x in 0..8 {
                    *g += map.get(c, y, x) as f64;
                }
            }
            *g /= 64.0;
        }
        for c in 0..4 {
            let mut expected = b[c];
            for k in 0..4 {
                expected += w[c * 4 + k] * gap[k];
            }
            assert!((got[c] - expected).abs() < 1e-12);
        }
        assert!(threshold_head_forward(&random_map(&mut rng, 3, 4, 4), &head).is_err());
    }

    #[test]
    fn gate_below_minimum_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = random_map(&mut rng, 3, 8, 8);
        let out = zebra_gate(&map, &[-0.5; 3], &ZebraConfig::hard(4, 0.5)).unwrap();
        assert_eq!(out.map, map);
        assert!(out.mask.keep.iter().all(|k| *k));
    }

    #[test]
    fn gate_half_threshold_example() {
        // One channel, two 2x2 blocks: max 0.3 and max 0.8.
        let data = vec![0.1, 0.3, 0.8, 0.0, 0.2, 0.0, 0.5, 0.6];
        let map = ActivationMap::new(data, 1, 2, 4, "l").unwrap();
        let out = zebra_gate(&map, &[0.5], &ZebraConfig::hard(2, 0.5)).unwrap();
        assert_eq!(out.mask.keep, vec![false, true]);
        assert_eq!(out.map.data(), &[0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.5, 0.6]);
    }

    #[test]
    fn gate_shape_errors() {
        let map = ActivationMap::zeros(2, 6, 6, "l").unwrap();
        assert!(zebra_gate(&map, &[0.0; 2], &ZebraConfig::hard(4, 0.0)).is_err());
        let map = ActivationMap::zeros(2, 8, 8, "l").unwrap();
        assert!(zebra_gate(&map, &[0.0; 3], &ZebraConfig::hard(4, 0.0)).is_err());
    }

    fn margin_ok(map: &ActivationMap, thresholds: &[f32], block: usize, margin: f32) -> bool {
        let layout = make_layout(map.height(), map.width(), block).unwrap();
        let stats = block_max(map, &layout).unwrap();
        let per = layout.blocks_per_channel();
        stats.max_values.iter().enumerate().all(|(b, m)| (m - thresholds[b / per]).abs() >= margin)
    }

    #[test]
    fn soft_gate_agrees_with_hard_gate_at_low_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..200 {
            let map = random_map(&mut rng, 3, 8, 8);
            let thresholds: Vec<f32> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            if !margin_ok(&map, &thresholds, 2, 1e-3) {
                continue;
            }
            checked += 1;
            let hard = zebra_gate(&map, &thresholds, &ZebraConfig::hard(2, 0.5)).unwrap();
            let mut cfg = ZebraConfig::hard(2, 0.5);
            cfg.gate_mode = GateMode::Soft;
            for temp in [1e-2f32, 1e-3, 1e-4, 1e-5] {
                cfg.soft_temperature = temp;
                let soft = zebra_gate(&map, &thresholds, &cfg).unwrap();
                assert_eq!(soft.mask, hard.mask);
            }
            cfg.soft_temperature = 1e-5;
            let soft = zebra_gate(&map, &thresholds, &cfg).unwrap();
            for (a, b) in soft.map.data().iter().zip(hard.map.data()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn hard_gate_gradient_is_zero_one_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = random_map(&mut rng, 4, 8, 8);
        let out = zebra_gate(&map, &[0.5; 4], &ZebraConfig::hard(4, 0.5)).unwrap();
        let grads = out.trace.backward(map.data(), &vec![1.0; map.data().len()]);
        for c in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    let g = grads.input[(c * 8 + y) * 8 + x];
                    let expected = if out.mask.get(c, y / 4, x / 4) { 1.0 } else { 0.0 };
                    assert_eq!(g.to_bits(), (expected as f32).to_bits());
                }
            }
        }
        assert!(grads.thresholds.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn soft_gate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = random_map(&mut rng, 2, 4, 4);
        let thresholds = vec![0.45f32, 0.55];
        let mut cfg = ZebraConfig::hard(2, 0.5);
        cfg.gate_mode = GateMode::Soft;
        cfg.soft_temperature = 0.3;
        let weights: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |m: &ActivationMap, t: &[f32]| -> f64 {
            let out = zebra_gate(m, t, &cfg).unwrap();
            out.map.data().iter().zip(&weights).map(|(a, w)| (*a as f64) * (*w as f64)).sum()
        };
        let out = zebra_gate(&map, &thresholds, &cfg).unwrap();
        let grads = out.trace.backward(map.data(), &weights);
        let h = 1e-3f32;
        for i in 0..map.data().len() {
            let mut plus = map.data().to_vec();
            plus[i] += h;
            let mut minus = map.data().to_vec();
            minus[i] -= h;
            let fp = objective(&ActivationMap::new(plus, 2, 4, 4, "t").unwrap(), &thresholds);
            let fm = objective(&ActivationMap::new(minus, 2, 4, 4, "t").unwrap(), &thresholds);
            let fd = (fp - fm) / (2.0 * h as f64);
            assert!((fd - grads.input[i] as f64).abs() < 2e-2, "input {i}: fd {fd} vs {}", grads.input[i]);
        }
        for c in 0..2 {
            let mut tp = thresholds.clone();
            tp[c] += h;
            let mut tm = thresholds.clone();
            tm[c] -= h;
            let fd = (objective(&map, &tp) - objective(&map, &tm)) / (2.0 * h as f64);
            assert!((fd - grads.thresholds[c] as f64).abs() < 2e-2);
        }
    }

    #[test]
    fn regularization_examples() {
        assert_eq!(regularization_loss(&[vec![0.5f64, 0.5], vec![0.5]], 0.5), 0.0);
        assert!((regularization_loss(&[vec![0.4f64, 0.6]], 0.5) - 0.02).abs() < 1e-15);
        assert_eq!(regularization_loss(&[vec![0.0f64]], 0.5), 0.25);
        assert_eq!(regularization_grad(&[0.4f64, 0.5], 0.5), vec![2.0 * (0.4 - 0.5), 0.0]);
    }

    #[test]
    fn total_loss_examples() {
        let mut cfg = ZebraConfig::hard(4, 0.1);
        assert!((total_loss(0.7, 0.02, &cfg) - 0.72).abs() < 1e-6);
        cfg.lambda_ce = 10.0;
        assert!((total_loss(0.1, 0.0, &cfg) - 1.0).abs() < 1e-6);
        cfg.lambda_ce = 1.0;
        assert_eq!(total_loss(0.35, 0.0, &cfg), 0.35);
        // Linear in ce with slope lambda.
        cfg.lambda_ce = 3.0;
        let a = total_loss(0.2, 0.1, &cfg);
        let b = total_loss(0.7, 0.1, &cfg);
        assert!(((b - a) / 0.5 - 3.0).abs() < 1e-5);
    }

    #[test]
    fn config_validation() {
        assert!(ZebraConfig::hard(4, 0.1).validate().is_ok());
        assert!(ZebraConfig::hard(0, 0.1).validate().is_err());
        assert!(ZebraConfig::hard(4, -0.1).validate().is_err());
        let mut cfg = ZebraConfig::hard(4, 0.1);
        cfg.lambda_ce = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lambda_ce = 1.0;
        cfg.soft_temperature = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fold_pins_thresholds_and_drops_heads() {
        let cfg = ZebraConfig::hard(2, 0.5);
        let states = vec![
            ZebraLayerState::training(ThresholdHead::from_parts("a", 2, vec![0.1; 4], vec![0.3, 0.9]).unwrap()),
            ZebraLayerState::training(ThresholdHead::at_target("b", 3, 0.2f32)),
        ];
        let folded = fold_for_inference(states, &cfg);
        for s in &folded {
            assert_eq!(s.mode, LayerMode::Inference);
            assert!(s.head.is_none());
            assert!(s.thresholds.iter().all(|&t| t == 0.5));
        }
    }

    #[test]
    fn fold_at_zero_prunes_only_natural_zero_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ZebraConfig::hard(2, 0.0);
        let mut state = fold_for_inference(vec![ZebraLayerState::training(ThresholdHead::at_target("l", 3, 0.7))], &cfg)
            .remove(0);
        let map = random_map(&mut rng, 3, 8, 8);
        let t = state.thresholds_for(&map).unwrap().to_vec();
        let out = zebra_gate(&map, &t, &cfg).unwrap();
        let layout = make_layout(8, 8, 2).unwrap();
        let stats = block_max(&map, &layout).unwrap();
        for (keep, m) in out.mask.keep.iter().zip(&stats.max_values) {
            assert_eq!(*keep, *m != 0.0);
        }
        assert_eq!(out.map, map);
    }

    #[test]
    fn converged_heads_fold_to_identical_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ZebraConfig::hard(4, 0.4);
        let head = ThresholdHead::at_target("l", 4, cfg.t_obj);
        let mut training = ZebraLayerState::training(head);
        let mut folded = fold_for_inference(vec![training.clone()], &cfg).remove(0);
        for _ in 0..20 {
            let map = random_map(&mut rng, 4, 8, 8);
            let tt = training.thresholds_for(&map).unwrap().to_vec();
            let tf = folded.thresholds_for(&map).unwrap().to_vec();
            let a = zebra_gate(&map, &tt, &cfg).unwrap();
            let b = zebra_gate(&map, &tf, &cfg).unwrap();
            assert_eq!(a.mask, b.mask);
            let layout = make_layout(8, 8, 4).unwrap();
            assert_eq!(apply_mask(&map, &a.mask, &layout).unwrap(), b.map);
        }
    }

    #[test]
    fn regularizer_bias_gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let map = random_map(&mut rng, 5, 8, 8);
        let t_obj = 0.3f64;
        let head = ThresholdHead::from_parts(
            "l",
            5,
            (0..25).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (0..5).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let pooled: Vec<f64> = global_average_pool(&map);
        let t = head.forward_pooled(&pooled).unwrap();
        let grads = head.backward_pooled(&pooled, &regularization_grad(&t, t_obj));
        let loss = |h: &ThresholdHead<f64>| regularization_loss(&[h.forward_pooled(&pooled).unwrap()], t_obj);
        let step = 1e-4;
        for i in 0..5 {
            let mut p = head.clone();
            p.bias[i] += step;
            let mut m = head.clone();
            m.bias[i] -= step;
            let fd = (loss(&p) - loss(&m)) / (2.0 * step);
            let rel = (fd - grads.bias[i]).abs() / grads.bias[i].abs().max(1e-12);
            assert!(rel < 1e-4, "bias {i}: rel err {rel}");
        }
    }
}
