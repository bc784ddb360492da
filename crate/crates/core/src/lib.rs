//! Gaussian mixture density estimation for data with known per-sample Gaussian noise
//! ("extreme deconvolution").
//!
//! Each observation is `x_i = R_i v_i + ε_i` with `ε_i ~ N(0, S_i)` and `v_i` drawn from a
//! `K`-component Gaussian mixture. Three fitters are provided:
//!
//! - [`em::fit_em`] in batch mode: classic full-data EM.
//! - [`em::fit_em`] in minibatch mode: online EM over running sufficient statistics, with
//!   a covariance update that avoids cancellation between large second moments.
//! - [`sgd::fit_sgd`]: Adam on the negative log-likelihood in unconstrained coordinates
//!   (softmax weights, log-diagonal Cholesky factors).
//!
//! Supporting modules cover data ingestion, synthetic data, k-means initialisation and
//! reporting.

pub mod data;
pub mod em;
pub mod error;
pub mod init;
pub mod likelihood;
pub mod linalg;
pub mod params;
pub mod report;
pub mod sgd;

pub use error::{Result, XdError};
pub use params::{constrain, unconstrain, GmmParams, NoisyPoint, Projection, UnconstrainedParams};
pub use report::{EpochRecord, FitObserver, FitReport, FitResult, Method, Schedule};
