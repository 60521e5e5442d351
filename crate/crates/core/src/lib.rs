//! Zero-block regularization of CNN activation maps.
//!
//! * [`blockgrid`]: block partitioning, per-block maxima and block masks.
//! * [`zebra`]: threshold heads, the block gate, the loss terms and
//!   inference-time threshold folding.
//! * [`bandwidth`]: analytic storage / index-overhead / FLOPS accounting.
//! * [`codec`]: the `ZBRA` block-sparse activation map format.

pub mod bandwidth;
pub mod blockgrid;
pub mod codec;
pub mod error;
pub mod map;
pub mod zebra;

pub use blockgrid::{
    apply_mask, block_max, make_layout, mask_from_thresholds, zero_block_fraction, BlockGridLayout, BlockMask,
    BlockStats,
};
pub use error::{Error, Result};
pub use map::ActivationMap;
pub use zebra::{GateMode, ThresholdHead, ZebraConfig, ZebraLayerState};
