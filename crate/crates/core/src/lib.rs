//! Black-box joint optimization of a universal, texture-constrained image
//! perturbation and an embedding-space prompt perturbation against
//! vision-language models that can only be queried.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: image tensors, the 2-D Haar pyramid, norm-ball projections,
//!   labelled RNG streams and the `MMT1` tensor file format.
//! * [`victim`]: the query-only oracle trait, query ledgers and a deterministic
//!   toy vision-language model with a white-box gradient hook for tests.
//! * [`perturbation`]: the tiled texture patch and the prompt delta.
//! * [`estimator`]: zeroth-order gradient estimates from loss differences.
//! * [`optimizer`]: the joint attack loop with cross-modal coupling.
//! * [`evaluation`]: similarity scoring, reports, transfer, defenses, ablations.
//! * [`corpus`], [`config`], [`artifact`]: experiment plumbing used by the CLI.

pub mod artifact;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod exec;
pub mod numerics;
pub mod optimizer;
pub mod perturbation;
pub mod victim;

pub use error::{Axis, Error, Result};
