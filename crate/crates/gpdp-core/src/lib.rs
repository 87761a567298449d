//! Core algorithms for a Gaussian-process-guided diffusion policy.
//!
//! The crate bundles everything the policy needs at decision time and during
//! offline training, with no file or terminal I/O:
//!
//! - [`nn`]: a minimal dense MLP engine with reverse-mode gradients and Adam,
//!   used for the noise estimator and the Q/V critics.
//! - [`diffusion`]: discrete VP-SDE noise schedule, forward noising, the
//!   epsilon-prediction loss, and guided/unguided reverse sampling.
//! - [`gpr`]: exact Gaussian process regression with a squared-exponential
//!   kernel, Cholesky-backed posteriors and marginal-likelihood fitting.
//! - [`critic`]: implicit Q-learning (expectile value regression, TD targets,
//!   soft target updates).
//! - [`policy`]: best-trajectory extraction, greedy relabeling, guidance
//!   fitting and the guided action sampler.
//! - [`env`]: a small episodic point-reacher environment with an injectable
//!   actuator fault, scripted behavior controllers and dataset generation.
//!
//! The crate is `no_std`-compatible (with `alloc`); all transcendental math
//! goes through `libm` so results are identical with and without `std`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod critic;
pub mod diffusion;
pub mod env;
mod error;
pub mod gpr;
pub mod linalg;
pub(crate) mod math;
pub mod nn;
pub mod policy;

pub use error::{Error, Result};
