//! Depth-progressive training of residual and transformer image classifiers.

pub mod accounting;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod error;
pub mod nn;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use backbone::{BackboneSpec, HeadKind, Preset, PrefixNetwork};
pub use error::{Error, Result};
pub use partition::{balanced_partition, StagePlan};
pub use tensor::Tensor;
pub use trainer::{run_curriculum, run_paired, train_entire, ProgressiveSchedule, RunReport};
