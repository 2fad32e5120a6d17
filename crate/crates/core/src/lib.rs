//! Backward knowledge distillation.
//!
//! A student network is distilled from a teacher with the usual softened-logit
//! objective, and the training set is periodically augmented with auxiliary
//! samples found by gradient ascent on the squared student/teacher output gap
//! with respect to the *input*. Token models run the same ascent in the
//! student's embedding space and map perturbed vectors into the teacher's
//! embedding space with a least-squares transform.
//!
//! Module map:
//!
//! - [`tensor`]: dense f64 tensors and a reverse-mode gradient tape.
//! - [`nn`]: MLPs, polynomial regressors, embedding-headed token models, checkpoints.
//! - [`losses`]: KD objectives, KL / cross-entropy, and the divergence loss.
//! - [`auxgen`]: divergence-maximizing sample generation and the embedding transform.
//! - [`distill`]: vanilla KD, the min-max pipeline, baselines and evaluation.
//! - [`data`]: IDX ingestion, synthetic/token generators, subsampling.
//! - [`config`] and [`cli`]: experiment configuration and command implementations.

pub mod auxgen;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
mod error;
pub mod losses;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
