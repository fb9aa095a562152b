//! Configuration, the joint training loop, checkpoints and the evaluation
//! protocols.

pub mod checkpoint;
mod config;
mod eval;
mod gradients;
mod optim;
mod train;

pub use config::{Preset, TaskSet, TrainConfig};
pub use eval::*;
pub use gradients::{toy_gradient_suite, GradientCase};
pub use optim::{adamw_update, cosine_lr, AdamHyper, AdamW};
pub use train::{batch_loss, prepare_sample, pretrain, BatchTerms, LossSettings, MclInputs, SampleInputs, StepLog, Trainer};
