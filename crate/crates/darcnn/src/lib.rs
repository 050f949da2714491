//! DARCNN: two-stage unsupervised domain adaptation for class-agnostic
//! instance segmentation.
//!
//! Stage 1 adapts features between a labelled source domain and an unlabelled
//! target domain through a domain separation module trained with four losses:
//! a warmup-scheduled MMD similarity loss on shared features, a soft
//! orthogonality loss between shared and private features, a self-supervised
//! background representation consistency loss on the target, and the usual
//! supervised detector losses on the source. Stage 2 refines the target
//! branch on confidence-thresholded pseudo-labels paired with photometric
//! augmentation.
//!
//! The numeric stack ([`tensor`], [`model`], [`losses`], [`train`]) is
//! generic over the scalar type via [`scalar::Scalar`]: `f32` is the training
//! default, `f64` is used where tight tolerances matter (gradient checks,
//! closed-form loss oracles). Concrete aliases live at the crate root.

pub mod cli;
pub mod core;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pseudolabel;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Scalar type used by the CLI training pipeline.
pub type TrainFloat = f32;
/// Scalar type used by gradient checks and loss oracles.
pub type CheckFloat = f64;

pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
