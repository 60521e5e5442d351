//! Desk-scale CNNs with a Zebra gate after every convolution's activation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use zebra_core::bandwidth::{ConsumerConv, LayerSpec};
use zebra_core::zebra::{fold_for_inference, GateMode};
use zebra_core::ZebraConfig;

use crate::error::{Result, TrainError};
use crate::gate::{GateLayer, GateSettings};
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward, BatchNorm2d, Conv2d, Linear, MaxPool2,
    Mode, ParamMut, StateVisitor,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    ToyCnn,
    VggSmall,
    ResnetSmall,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ToyCnn => "toy_cnn",
            Arch::VggSmall => "vgg_small",
            Arch::ResnetSmall => "resnet_small",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageSpec {
    /// Conv → BN → ReLU → gate.
    Conv { name: String, out_channels: usize, kernel: usize, stride: usize },
    MaxPool,
    /// Basic residual block; `mid_channels` is the width after the first conv.
    Residual { name: String, mid_channels: usize, out_channels: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stages: Vec<StageSpec>,
}

fn conv(name: &str, out_channels: usize, stride: usize) -> StageSpec {
    StageSpec::Conv { name: name.into(), out_channels, kernel: 3, stride }
}

fn residual(name: &str, out_channels: usize, stride: usize) -> StageSpec {
    StageSpec::Residual { name: name.into(), mid_channels: out_channels, out_channels, stride }
}

impl ModelSpec {
    pub fn for_arch(arch: Arch, input_size: usize, num_classes: usize) -> Self {
        let stages = match arch {
            Arch::ToyCnn => vec![conv("conv1", 8, 1), conv("conv2", 16, 2), conv("conv3", 16, 1)],
            Arch::VggSmall => vec![
                conv("conv1", 16, 1),
                conv("conv2", 16, 1),
                StageSpec::MaxPool,
                conv("conv3", 32, 1),
                conv("conv4", 32, 1),
                StageSpec::MaxPool,
                conv("conv5", 64, 1),
            ],
            Arch::ResnetSmall => vec![
                conv("stem", 16, 1),
                residual("layer1.0", 16, 1),
                residual("layer2.0", 32, 2),
                residual("layer3.0", 64, 2),
            ],
        };
        Self { arch, in_channels: 3, input_size, num_classes, stages }
    }
}

#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub gate: Option<GateLayer>,
    relu_out: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub name: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub gate1: Option<GateLayer>,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
    pub gate2: Option<GateLayer>,
    act1: Option<Tensor>,
    out_relu: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub enum Stage {
    Conv(ConvUnit),
    Pool(MaxPool2),
    Residual(Box<ResBlock>),
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    pub stages: Vec<Stage>,
    pub fc: Linear,
    pub settings: GateSettings,
    feat_shape: Option<[usize; 4]>,
}

fn gate_for(
    zebra: Option<&ZebraConfig>,
    id: &str,
    channels: usize,
    size: usize,
) -> Result<Option<GateLayer>> {
    zebra.map(|z| GateLayer::new(id, channels, size, size, z.block_size, z.t_obj)).transpose()
}

fn gated_forward(gate: &mut Option<GateLayer>, x: Tensor, mode: Mode, settings: &GateSettings) -> Tensor {
    match gate {
        Some(g) => g.forward(x, mode, settings),
        None => x,
    }
}

fn gated_backward(gate: &mut Option<GateLayer>, grad: Tensor, t_obj: f32) -> Tensor {
    match gate {
        Some(g) => g.backward(&grad, t_obj),
        None => grad,
    }
}

impl Network {
    /// Builds the network; `zebra = None` gives the gate-free control model.
    /// Weight initialization draws from `rng` identically in both cases.
    pub fn new(spec: ModelSpec, zebra: Option<&ZebraConfig>, rng: &mut impl Rng) -> Result<Self> {
        if let Some(z) = zebra {
            z.validate()?;
        }
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut ch = spec.in_channels;
        let mut size = spec.input_size;
        for stage in &spec.stages {
            match stage {
                StageSpec::Conv { name, out_channels, kernel, stride } => {
                    let conv = Conv2d::new(name.clone(), ch, *out_channels, *kernel, *stride, rng);
                    size = conv.output_size(size, size).0;
                    stages.push(Stage::Conv(ConvUnit {
                        bn: BatchNorm2d::new(format!("{name}.bn"), *out_channels),
                        gate: gate_for(zebra, name, *out_channels, size)?,
                        conv,
                        relu_out: None,
                    }));
                    ch = *out_channels;
                }
                StageSpec::MaxPool => {
                    if size % 2 != 0 {
                        return Err(TrainError::Topology(format!("max pool on odd map size {size}")));
                    }
                    size /= 2;
                    stages.push(Stage::Pool(MaxPool2::default()));
                }
                StageSpec::Residual { name, mid_channels, out_channels, stride } => {
                    let conv1 = Conv2d::new(format!("{name}.conv1"), ch, *mid_channels, 3, *stride, rng);
                    let out_size = conv1.output_size(size, size).0;
                    let conv2 = Conv2d::new(format!("{name}.conv2"), *mid_channels, *out_channels, 3, 1, rng);
                    let shortcut = (*stride != 1 || ch != *out_channels).then(|| {
                        (
                            Conv2d::new(format!("{name}.shortcut"), ch, *out_channels, 1, *stride, rng),
                            BatchNorm2d::new(format!("{name}.shortcut.bn"), *out_channels),
                        )
                    });
                    stages.push(Stage::Residual(Box::new(ResBlock {
                        name: name.clone(),
                        bn1: BatchNorm2d::new(format!("{name}.bn1"), *mid_channels),
                        gate1: gate_for(zebra, &format!("{name}.act1"), *mid_channels, out_size)?,
                        bn2: BatchNorm2d::new(format!("{name}.bn2"), *out_channels),
                        gate2: gate_for(zebra, &format!("{name}.out"), *out_channels, out_size)?,
                        conv1,
                        conv2,
                        shortcut,
                        act1: None,
                        out_relu: None,
                    })));
                    size = out_size;
                    ch = *out_channels;
                }
            }
        }
        let fc = Linear::new("fc", ch, spec.num_classes, rng);
        let settings = match zebra {
            Some(z) => GateSettings { t_obj: z.t_obj, mode: z.gate_mode, temperature: z.soft_temperature, force_open: false },
            None => GateSettings { t_obj: 0.0, mode: GateMode::Hard, temperature: 1.0, force_open: true },
        };
        Ok(Self { spec, stages, fc, settings, feat_shape: None })
    }

    pub fn is_gated(&self) -> bool {
        !self.gates().is_empty()
    }

    /// Logits `[N, classes]` row-major.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Vec<f32> {
        let cache = mode == Mode::Train;
        let settings = self.settings;
        let mut h = x.clone();
        for stage in &mut self.stages {
            h = match stage {
                Stage::Conv(u) => {
                    let mut y = u.bn.forward(&u.conv.forward(&h, cache), mode);
                    relu_forward(&mut y.data);
                    if cache {
                        u.relu_out = Some(y.clone());
                    }
                    gated_forward(&mut u.gate, y, mode, &settings)
                }
                Stage::Pool(p) => p.forward(&h, cache),
                Stage::Residual(b) => {
                    let mut a = b.bn1.forward(&b.conv1.forward(&h, cache), mode);
                    relu_forward(&mut a.data);
                    if cache {
                        b.act1 = Some(a.clone());
                    }
                    let a = gated_forward(&mut b.gate1, a, mode, &settings);
                    let mut y = b.bn2.forward(&b.conv2.forward(&a, cache), mode);
                    match &mut b.shortcut {
                        Some((c, bn)) => y.add_assign(&bn.forward(&c.forward(&h, cache), mode)),
                        None => y.add_assign(&h),
                    }
                    relu_forward(&mut y.data);
                    if cache {
                        b.out_relu = Some(y.clone());
                    }
                    gated_forward(&mut b.gate2, y, mode, &settings)
                }
            };
        }
        self.feat_shape = Some(h.shape());
        let pooled = global_avg_pool(&h);
        self.fc.forward(&pooled, h.n, cache)
    }

    /// Backpropagates `dlogits` through the whole network, accumulating gradients.
    pub fn backward(&mut self, dlogits: &[f32]) {
        let shape = self.feat_shape.expect("backward without forward");
        let t_obj = self.settings.t_obj;
        let dpool = self.fc.backward(dlogits, shape[0]);
        let mut g = global_avg_pool_backward(&dpool, shape);
        for stage in self.stages.iter_mut().rev() {
            g = match stage {
                Stage::Conv(u) => {
                    let mut g = gated_backward(&mut u.gate, g, t_obj);
                    relu_backward(&u.relu_out.take().expect("cached relu").data, &mut g.data);
                    u.conv.backward(&u.bn.backward(&g))
                }
                Stage::Pool(p) => p.backward(&g),
                Stage::Residual(b) => {
                    let mut g = gated_backward(&mut b.gate2, g, t_obj);
                    relu_backward(&b.out_relu.take().expect("cached relu").data, &mut g.data);
                    let g_skip = match &mut b.shortcut {
                        Some((c, bn)) => c.backward(&bn.backward(&g)),
                        None => g.clone(),
                    };
                    let ga = b.conv2.backward(&b.bn2.backward(&g));
                    let mut ga = gated_backward(&mut b.gate1, ga, t_obj);
                    relu_backward(&b.act1.take().expect("cached relu").data, &mut ga.data);
                    let mut gx = b.conv1.backward(&b.bn1.backward(&ga));
                    gx.add_assign(&g_skip);
                    gx
                }
            };
        }
    }

    pub fn gates(&self) -> Vec<&GateLayer> {
        let mut out = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Conv(u) => out.extend(u.gate.as_ref()),
                Stage::Pool(_) => {}
                Stage::Residual(b) => {
                    out.extend(b.gate1.as_ref());
                    out.extend(b.gate2.as_ref());
                }
            }
        }
        out
    }

    pub fn gates_mut(&mut self) -> Vec<&mut GateLayer> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            match stage {
                Stage::Conv(u) => out.extend(u.gate.as_mut()),
                Stage::Pool(_) => {}
                Stage::Residual(b) => {
                    out.extend(b.gate1.as_mut());
                    out.extend(b.gate2.as_mut());
                }
            }
        }
        out
    }

    pub fn is_folded(&self) -> bool {
        self.gates().iter().all(|g| g.is_folded())
    }

    /// Drops every threshold head and pins thresholds at `t_obj`.
    pub fn fold(&mut self, cfg: &ZebraConfig) {
        for gate in self.gates_mut() {
            gate.state = fold_for_inference(vec![gate.state.clone()], cfg).pop().expect("one state in, one out");
        }
        self.settings.t_obj = cfg.t_obj;
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        for stage in &mut self.stages {
            match stage {
                Stage::Conv(u) => {
                    u.conv.visit_params(f);
                    u.bn.visit_params(f);
                    if let Some(g) = &mut u.gate {
                        g.visit_params(f);
                    }
                }
                Stage::Pool(_) => {}
                Stage::Residual(b) => {
                    b.conv1.visit_params(f);
                    b.bn1.visit_params(f);
                    if let Some(g) = &mut b.gate1 {
                        g.visit_params(f);
                    }
                    b.conv2.visit_params(f);
                    b.bn2.visit_params(f);
                    if let Some((c, bn)) = &mut b.shortcut {
                        c.visit_params(f);
                        bn.visit_params(f);
                    }
                    if let Some(g) = &mut b.gate2 {
                        g.visit_params(f);
                    }
                }
            }
        }
        self.fc.visit_params(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }

    pub fn visit_state(&mut self, f: &mut StateVisitor<'_>) {
        for stage in &mut self.stages {
            match stage {
                Stage::Conv(u) => {
                    u.conv.visit_state(f);
                    u.bn.visit_state(f);
                    if let Some(g) = &mut u.gate {
                        g.visit_state(f);
                    }
                }
                Stage::Pool(_) => {}
                Stage::Residual(b) => {
                    b.conv1.visit_state(f);
                    b.bn1.visit_state(f);
                    if let Some(g) = &mut b.gate1 {
                        g.visit_state(f);
                    }
                    b.conv2.visit_state(f);
                    b.bn2.visit_state(f);
                    if let Some((c, bn)) = &mut b.shortcut {
                        c.visit_state(f);
                        bn.visit_state(f);
                    }
                    if let Some(g) = &mut b.gate2 {
                        g.visit_state(f);
                    }
                }
            }
        }
        self.fc.visit_state(f);
    }

    /// Weight-pruning masks of every conv and the classifier.
    pub fn visit_masks(&mut self, f: &mut dyn FnMut(&str, &mut Option<Vec<bool>>)) {
        for stage in &mut self.stages {
            match stage {
                Stage::Conv(u) => u.conv.visit_masks(f),
                Stage::Pool(_) => {}
                Stage::Residual(b) => {
                    b.conv1.visit_masks(f);
                    b.conv2.visit_masks(f);
                    if let Some((c, _)) = &mut b.shortcut {
                        c.visit_masks(f);
                    }
                }
            }
        }
        self.fc.visit_masks(f);
    }

    /// Batch-norm layers whose channels may be slimmed. Block-output norms
    /// (`bn2`, shortcut norms) and norms feeding an identity shortcut are
    /// exempt so residual additions keep matching widths.
    pub fn prunable_bns(&self) -> Vec<&BatchNorm2d> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Conv(u) if !self.feeds_identity_shortcut(i) => out.push(&u.bn),
                Stage::Residual(b) => out.push(&b.bn1),
                _ => {}
            }
        }
        out
    }

    fn feeds_identity_shortcut(&self, i: usize) -> bool {
        self.stages[i + 1..]
            .iter()
            .find(|s| !matches!(s, Stage::Pool(_)))
            .is_some_and(|s| matches!(s, Stage::Residual(b) if b.shortcut.is_none()))
    }

    /// One [`LayerSpec`] per gate, in forward order, with the main-path
    /// convolution that consumes each map.
    pub fn gated_layer_specs(&self, bits: usize) -> Vec<LayerSpec> {
        // (gate, consumer conv of the map it produces)
        let mut entries: Vec<(&GateLayer, Option<ConsumerConv>)> = Vec::new();
        let mut pending: Vec<usize> = Vec::new();
        let consumer_of = |c: &Conv2d| ConsumerConv { kernel: c.kernel, out_channels: c.out_ch, stride: c.stride };
        let resolve = |entries: &mut Vec<(&GateLayer, Option<ConsumerConv>)>, pending: &mut Vec<usize>, c: &Conv2d| {
            for i in pending.drain(..) {
                entries[i].1 = Some(consumer_of(c));
            }
        };
        for stage in &self.stages {
            match stage {
                Stage::Conv(u) => {
                    resolve(&mut entries, &mut pending, &u.conv);
                    if let Some(g) = &u.gate {
                        pending.push(entries.len());
                        entries.push((g, None));
                    }
                }
                Stage::Pool(_) => {}
                Stage::Residual(b) => {
                    resolve(&mut entries, &mut pending, &b.conv1);
                    if let Some(g) = &b.gate1 {
                        entries.push((g, Some(consumer_of(&b.conv2))));
                    }
                    if let Some(g) = &b.gate2 {
                        pending.push(entries.len());
                        entries.push((g, None));
                    }
                }
            }
        }
        entries
            .into_iter()
            .map(|(g, consumer)| LayerSpec {
                layer_id: g.layer_id().to_string(),
                channels: g.channels(),
                height: g.layout.height,
                width: g.layout.width,
                block_size: g.layout.effective_block_size,
                bits,
                consumer,
            })
            .collect()
    }

    /// Channel-slimmed copy keeping, for each named batch norm, the channels
    /// marked `true`. Norms absent from `keep` keep every channel.
    pub fn rebuild_slimmed(&self, keep: &BTreeMap<String, Vec<bool>>) -> Result<Network> {
        let prunable: Vec<&str> = self.prunable_bns().iter().map(|b| b.name.as_str()).collect();
        for (name, mask) in keep {
            if !prunable.contains(&name.as_str()) {
                if mask.iter().all(|&k| k) {
                    continue;
                }
                return Err(TrainError::Topology(format!("`{name}` is not a prunable batch norm")));
            }
            if !mask.iter().any(|&k| k) {
                return Err(TrainError::Topology(format!("`{name}` would lose every channel")));
            }
        }
        let t_obj = self.settings.t_obj;
        let mask_for = |bn: &BatchNorm2d| -> Result<Vec<bool>> {
            match keep.get(&bn.name) {
                Some(m) if m.len() != bn.channels => Err(TrainError::Topology(format!(
                    "`{}` mask has {} entries for {} channels",
                    bn.name,
                    m.len(),
                    bn.channels
                ))),
                Some(m) => Ok(m.clone()),
                None => Ok(vec![true; bn.channels]),
            }
        };
        let count = |m: &[bool]| m.iter().filter(|&&k| k).count();
        let mut keep_in = vec![true; self.spec.in_channels];
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut spec_stages = Vec::with_capacity(self.stages.len());
        for (stage, spec) in self.stages.iter().zip(&self.spec.stages) {
            match (stage, spec) {
                (Stage::Conv(u), StageSpec::Conv { name, kernel, stride, .. }) => {
                    let keep_out = mask_for(&u.bn)?;
                    stages.push(Stage::Conv(ConvUnit {
                        conv: u.conv.select_channels(&keep_out, &keep_in),
                        bn: u.bn.select_channels(&keep_out),
                        gate: u.gate.as_ref().map(|g| g.select_channels(&keep_out, t_obj)),
                        relu_out: None,
                    }));
                    spec_stages.push(StageSpec::Conv {
                        name: name.clone(),
                        out_channels: count(&keep_out),
                        kernel: *kernel,
                        stride: *stride,
                    });
                    keep_in = keep_out;
                }
                (Stage::Pool(_), StageSpec::MaxPool) => {
                    stages.push(Stage::Pool(MaxPool2::default()));
                    spec_stages.push(StageSpec::MaxPool);
                }
                (Stage::Residual(b), StageSpec::Residual { name, out_channels, stride, .. }) => {
                    if b.shortcut.is_none() && keep_in.iter().any(|&k| !k) {
                        return Err(TrainError::Topology(format!("identity shortcut of `{name}` needs all input channels")));
                    }
                    let keep_mid = mask_for(&b.bn1)?;
                    let all_out = vec![true; *out_channels];
                    stages.push(Stage::Residual(Box::new(ResBlock {
                        name: b.name.clone(),
                        conv1: b.conv1.select_channels(&keep_mid, &keep_in),
                        bn1: b.bn1.select_channels(&keep_mid),
                        gate1: b.gate1.as_ref().map(|g| g.select_channels(&keep_mid, t_obj)),
                        conv2: b.conv2.select_channels(&all_out, &keep_mid),
                        bn2: b.bn2.clone(),
                        shortcut: b.shortcut.as_ref().map(|(c, bn)| (c.select_channels(&all_out, &keep_in), bn.clone())),
                        gate2: b.gate2.clone(),
                        act1: None,
                        out_relu: None,
                    })));
                    spec_stages.push(StageSpec::Residual {
                        name: name.clone(),
                        mid_channels: count(&keep_mid),
                        out_channels: *out_channels,
                        stride: *stride,
                    });
                    keep_in = all_out;
                }
                _ => return Err(TrainError::Topology("network and spec disagree".into())),
            }
        }
        let mut net = Network {
            spec: ModelSpec { stages: spec_stages, ..self.spec.clone() },
            stages,
            fc: self.fc.select_inputs(&keep_in),
            settings: self.settings,
            feat_shape: None,
        };
        for g in net.gates_mut() {
            g.reset_stats();
        }
        Ok(net)
    }
}
