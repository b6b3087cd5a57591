//! Diffusion generative models for continuous-time series.
//!
//! The forward process corrupts a whole series at once with noise drawn from a
//! stationary stochastic process (RBF Gaussian process or Ornstein–Uhlenbeck)
//! evaluated on the series' own, possibly irregular, time grid. Two flavours are
//! provided:
//!
//! * [`dspd`]: a fixed number of noise scales, trained with the noise-prediction
//!   objective and sampled ancestrally.
//! * [`cspd`]: a variance-preserving SDE whose diffusion term is coloured by the
//!   Cholesky factor of the kernel matrix, sampled with the reverse SDE or the
//!   probability-flow ODE.
//!
//! With the white kernel both collapse to the classical vector-valued models.

pub mod cspd;
pub mod datasets;
pub mod denoiser;
pub mod dspd;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod series;
pub mod verify;

pub use error::{Error, Result};
pub use noise::{KernelKind, KernelSpec};
pub use series::{Series, TimeGrid, TimeSeriesBatch};

/// Version string written into every file header.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
