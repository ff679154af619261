//! Sparse-dense residual fusion for diffusion transformers, at desk scale.
//!
//! The crate is split along the pipeline:
//!
//! * [`grid`] turns images into positioned token sequences and back, and
//!   provides the 2D rotary position embedding.
//! * [`subsample`] draws token-drop masks and restores sparse sequences by
//!   padding with the mask token.
//! * [`net`] is the three-stage transformer (dense encoder, sparse middle,
//!   dense decoder) joined by a channel-concatenation fusion projection, with
//!   hand-written reverse-mode gradients.
//! * [`flow`] holds the linear-interpolant flow-matching objective.
//! * [`train`] runs masked pre-training and full-token fine-tuning.
//! * [`sample`] integrates the probability-flow ODE with no guidance,
//!   classifier-free guidance or path-drop guidance.
//! * [`cost`] is an analytical FLOPs model of the forward pass.
//! * [`harness`] provides the synthetic blob dataset, configuration, the
//!   end-to-end pipeline and on-disk artifacts.

pub mod cost;
pub mod error;
pub mod flow;
pub mod grid;
pub mod harness;
pub mod net;
pub mod rng;
pub mod sample;
pub mod scalar;
pub mod subsample;
pub mod train;

pub use error::{Result, SprintError};
pub use scalar::Scalar;
