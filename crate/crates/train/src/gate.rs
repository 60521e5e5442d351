use zebra_core::zebra::{gate_in_place, regularization_grad, GateMode, GateTrace, LayerMode};
use zebra_core::{make_layout, BlockGridLayout, BlockMask, ThresholdHead, ZebraLayerState};

use crate::error::Result;
use crate::layers::{Mode, ParamKind, ParamMut, StateVisitor};
use crate::tensor::Tensor;

/// Gate behaviour shared by every gated layer of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSettings {
    pub t_obj: f32,
    pub mode: GateMode,
    pub temperature: f32,
    /// Thresholds pinned at `-inf`: every block passes and heads are bypassed.
    pub force_open: bool,
}

/// Running kept/total block counts since the last reset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockCounts {
    pub kept: u64,
    pub total: u64,
}

impl BlockCounts {
    pub fn zero_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            1.0 - self.kept as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone)]
struct Cache {
    input: Tensor,
    pooled: Vec<Vec<f32>>,
    thresholds: Vec<Vec<f32>>,
    traces: Vec<GateTrace>,
    used_head: bool,
}

/// A Zebra gate plus its threshold head, operating on `[N, C, H, W]` batches.
#[derive(Debug, Clone)]
pub struct GateLayer {
    pub state: ZebraLayerState,
    pub layout: BlockGridLayout,
    pub grad_weights: Vec<f32>,
    pub grad_bias: Vec<f32>,
    pub counts: BlockCounts,
    /// Largest `|T - t_obj|` seen since the last reset.
    pub max_deviation: f32,
    /// Sum over images of the per-image regularizer from the last forward.
    pub last_reg: f64,
    /// When set, post-gate outputs and masks of every forward are kept here.
    pub capture: Option<Capture>,
    cache: Option<Cache>,
}

#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub outputs: Vec<Tensor>,
    pub masks: Vec<BlockMask>,
}

impl GateLayer {
    pub fn new(layer_id: &str, channels: usize, height: usize, width: usize, block_size: usize, t_obj: f32) -> Result<Self> {
        let layout = make_layout(height, width, block_size)?;
        Ok(Self::with_state(ZebraLayerState::training(ThresholdHead::at_target(layer_id, channels, t_obj)), layout))
    }

    pub fn with_state(state: ZebraLayerState, layout: BlockGridLayout) -> Self {
        let c = state.channels();
        Self {
            state,
            layout,
            grad_weights: vec![0.0; c * c],
            grad_bias: vec![0.0; c],
            counts: BlockCounts::default(),
            max_deviation: 0.0,
            last_reg: 0.0,
            capture: None,
            cache: None,
        }
    }

    pub fn layer_id(&self) -> &str {
        &self.state.layer_id
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }

    pub fn is_folded(&self) -> bool {
        self.state.mode == LayerMode::Inference
    }

    pub fn reset_stats(&mut self) {
        self.counts = BlockCounts::default();
        self.max_deviation = 0.0;
    }

    pub fn forward(&mut self, x: Tensor, mode: Mode, settings: &GateSettings) -> Tensor {
        let mut out = x.clone();
        let c = x.c;
        let head = match (&self.state.head, self.state.mode) {
            (Some(h), LayerMode::Training) if !settings.force_open => Some(h),
            _ => None,
        };
        let gate_mode = if mode == Mode::Train { settings.mode } else { GateMode::Hard };
        let mut pooled_all = Vec::with_capacity(x.n);
        let mut thresholds_all = Vec::with_capacity(x.n);
        let mut traces = Vec::with_capacity(x.n);
        self.last_reg = 0.0;
        for n in 0..x.n {
            let sample = out.sample_mut(n);
            let (pooled, thresholds) = if settings.force_open {
                (Vec::new(), vec![f32::NEG_INFINITY; c])
            } else if let Some(head) = head {
                let pooled = zebra_core::zebra::global_average_pool_raw::<f32>(sample, c);
                let t = head.forward_pooled(&pooled).expect("head matches gate channels");
                (pooled, t)
            } else {
                (Vec::new(), self.state.thresholds.clone())
            };
            if !settings.force_open {
                for &t in &thresholds {
                    let d = (t - settings.t_obj).abs();
                    self.max_deviation = self.max_deviation.max(d);
                    self.last_reg += (d as f64) * (d as f64);
                }
            }
            let trace = gate_in_place(sample, c, &self.layout, &thresholds, gate_mode, settings.temperature)
                .expect("gate geometry fixed at build time");
            self.counts.kept += trace.mask.kept_count() as u64;
            self.counts.total += trace.mask.len() as u64;
            if let Some(cap) = self.capture.as_mut() {
                cap.masks.push(trace.mask.clone());
            }
            if n + 1 == x.n {
                self.state.last_mask = Some(trace.mask.clone());
                if head.is_some() {
                    self.state.thresholds.clone_from(&thresholds);
                }
            }
            pooled_all.push(pooled);
            thresholds_all.push(thresholds);
            traces.push(trace);
        }
        if let Some(cap) = self.capture.as_mut() {
            cap.outputs.push(out.clone());
        }
        self.cache = (mode == Mode::Train).then(|| Cache {
            input: x,
            pooled: pooled_all,
            thresholds: thresholds_all,
            traces,
            used_head: head.is_some(),
        });
        out
    }

    /// `grad_out` is the gradient of the scaled CE term; the regularizer's
    /// contribution (batch mean of per-image sums) is added here.
    pub fn backward(&mut self, grad_out: &Tensor, t_obj: f32) -> Tensor {
        let cache = self.cache.take().expect("gate backward without cached forward");
        let mut dx = Tensor::zeros(cache.input.n, cache.input.c, cache.input.h, cache.input.w);
        let plane = cache.input.plane() as f32;
        let batch = cache.input.n as f32;
        for n in 0..cache.input.n {
            let grads = cache.traces[n].backward(cache.input.sample(n), grad_out.sample(n));
            let dst = dx.sample_mut(n);
            dst.copy_from_slice(&grads.input);
            if !cache.used_head {
                continue;
            }
            let head = self.state.head.as_ref().expect("head present while training");
            let reg = regularization_grad(&cache.thresholds[n], t_obj);
            let dt: Vec<f32> = grads.thresholds.iter().zip(&reg).map(|(g, r)| g + r / batch).collect();
            let hg = head.backward_pooled(&cache.pooled[n], &dt);
            for (a, b) in self.grad_weights.iter_mut().zip(&hg.weights) {
                *a += b;
            }
            for (a, b) in self.grad_bias.iter_mut().zip(&hg.bias) {
                *a += b;
            }
            for (ch, g) in dst.chunks_mut(cache.input.plane()).zip(&hg.pooled) {
                let share = g / plane;
                for v in ch {
                    *v += share;
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        if self.state.mode != LayerMode::Training {
            return;
        }
        if let Some(head) = self.state.head.as_mut() {
            f(ParamMut {
                name: format!("{}.head.weight", head.layer_id),
                kind: ParamKind::HeadWeight,
                value: &mut head.weights,
                grad: &mut self.grad_weights,
                mask: None,
            });
            f(ParamMut {
                name: format!("{}.head.bias", head.layer_id),
                kind: ParamKind::HeadBias,
                value: &mut head.bias,
                grad: &mut self.grad_bias,
                mask: None,
            });
        }
    }

    pub fn visit_state(&mut self, f: &mut StateVisitor<'_>) {
        if let Some(head) = self.state.head.as_mut() {
            let c = head.channels;
            f(&format!("{}.head.weight", head.layer_id), &[c, c], &mut head.weights);
            f(&format!("{}.head.bias", head.layer_id), &[c], &mut head.bias);
        }
    }

    /// Keeps the selected channels of the head (rows and columns).
    pub fn select_channels(&self, keep: &[bool], t_obj: f32) -> GateLayer {
        let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        let c = self.channels();
        let state = match &self.state.head {
            Some(head) => {
                let weights = idx.iter().flat_map(|&r| idx.iter().map(move |&k| head.weights[r * c + k])).collect();
                let bias = idx.iter().map(|&r| head.bias[r]).collect();
                let head = ThresholdHead::from_parts(head.layer_id.clone(), idx.len(), weights, bias)
                    .expect("consistent head shape");
                ZebraLayerState::training(head)
            }
            None => ZebraLayerState {
                layer_id: self.state.layer_id.clone(),
                thresholds: vec![t_obj; idx.len()],
                last_mask: None,
                mode: self.state.mode,
                head: None,
            },
        };
        GateLayer::with_state(state, self.layout)
    }
}
