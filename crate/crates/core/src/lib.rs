//! A laboratory for iteratively pre-conditioned stochastic gradient descent
//! (IPSG) on server/agent distributed linear least squares.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense matrices, symmetric eigenvalues, Cholesky solves.
//! * [`datasets`]: Matrix Market and CSV loaders, preprocessing, partitions.
//! * [`optimizers`]: the IPSG update and the SGD/AdaGrad/Adam/AMSGrad baselines.
//! * [`simnet`]: the synchronous server/agent round protocol and stopping rule.
//! * [`theory`]: convergence constants and Monte Carlo checks of the bounds.
//! * [`stateest`]: initial-state recovery for LTI systems via regression.
//! * [`presets`]: named datasets and their tuned parameters.

pub mod datasets;
pub mod error;
pub mod linalg;
pub mod optimizers;
pub mod presets;
pub mod rng;
pub mod simnet;
pub mod stateest;
pub mod theory;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use linalg::Matrix;
