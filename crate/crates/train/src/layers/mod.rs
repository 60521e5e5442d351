//! Hand-written layers with explicit forward/backward passes.
//!
//! Each layer caches what its backward pass needs during a training-mode
//! forward and accumulates parameter gradients into its own buffers.

mod batchnorm;
mod conv;
mod linear;
mod pool;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    LinearBias,
    BnGamma,
    BnBeta,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    pub fn is_head(self) -> bool {
        matches!(self, ParamKind::HeadWeight | ParamKind::HeadBias)
    }

    pub fn is_prunable_weight(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

/// Mutable view of one trainable tensor.
pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
    /// Frozen-weight mask from weight pruning (`false` = pinned at zero).
    pub mask: Option<&'a [bool]>,
}

/// Every named tensor that makes up a checkpoint: parameters and buffers.
pub type StateVisitor<'a> = dyn FnMut(&str, &[usize], &mut Vec<f32>) + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn relu_forward(data: &mut [f32]) {
    for v in data.iter_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// ReLU backward using the post-activation output: gradient passes where `out > 0`.
pub(crate) fn relu_backward(out: &[f32], grad: &mut [f32]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}
