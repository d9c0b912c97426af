//! Matrix-free sensor placement for weak-constraint 4D-Var.
//!
//! The crate is organised bottom-up:
//!
//! * [`operators`]: the linear-operator abstraction and the structural operators of
//!   weak-constraint assimilation (coupling `L`, its inverse, block observation,
//!   selection embeddings).
//! * [`covariance`]: background, model-error and noise covariance models.
//! * [`assimilation`]: forecast prior, MAP solve, strong-constraint posterior.
//! * [`criteria`]: the expected-information-gain criterion in four formulations.
//! * [`traceest`]: Lanczos, stochastic Lanczos quadrature and XNysTrace.
//! * [`selection`]: GKS column subset selection, randomized adjoint-free selection,
//!   greedy, exhaustive and random baselines.
//! * [`models`]: the 1D heat and 2D advection-diffusion model problems.

pub mod assimilation;
pub mod covariance;
pub mod criteria;
mod error;
pub mod linalg;
pub mod models;
pub mod operators;
pub mod rng;
pub mod selection;
pub mod traceest;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
