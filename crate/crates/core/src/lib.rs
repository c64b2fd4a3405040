//! Hybrid memoised wake-sleep (HMWS) for generative models with discrete and
//! continuous latent variables.
//!
//! The crate is organised bottom-up:
//!
//! - [`ad`]: tensors, a reverse-mode tape, the parameter store and Adam.
//! - [`prob`]: distributions, importance-sampling estimators and a conjugate
//!   Gaussian testbed with closed-form marginals.
//! - [`model`]: the [`HybridModel`](model::HybridModel) contract every domain implements.
//! - [`hmws`]: memory, wake phase, replay and fantasy gradients.
//! - [`baselines`]: REINFORCE, VIMCO, RWS and the IWAE evaluation bound.
//! - [`gp`]: Gaussian-process kernel-structure model for time series.
//! - [`blocks`]: 2D compositional block-tower scenes.
//! - [`harness`]: training loop, datasets, metrics, checkpoints and exports.

pub mod ad;
pub mod baselines;
pub mod blocks;
mod error;
pub mod gp;
pub mod harness;
pub mod hmws;
pub mod model;
pub mod nn;
pub mod prob;

pub use error::{Error, Result};
