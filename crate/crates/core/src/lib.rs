//! Multi-modal, multi-task self-supervised pre-training for point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: sampling, grouping, masking and augmentation kernels.
//! * [`tensor`]: a small reverse-mode differentiation engine.
//! * [`backbone`]: mini-PointNet embedding, transformer encoder and the
//!   masked-token decoder.
//! * [`pretext`]: token reconstruction, query discrimination and the
//!   contrastive 3D/2D branch.
//! * [`losses`]: Chamfer metrics, BCE, NT-Xent, MoCo and the joint objective.
//! * [`data`]: the synthetic labelled shape generator.
//! * [`harness`]: config, AdamW training loop, checkpoints and evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod pretext;
pub mod tensor;

pub use error::{MmptError, Result};
