//! Training harness for Zebra-gated CNNs at desk scale: layers with
//! hand-written backward passes, gated model definitions, datasets, SGD,
//! static pruning, checkpoints and experiment orchestration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gate;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod pruning;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{Result, TrainError};
pub use harness::{evaluate, train, TrainMetrics, TrainOutcome};
pub use network::{Arch, ModelSpec, Network};
