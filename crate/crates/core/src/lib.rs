//! Train-BatchNorm-only neural architecture search at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: float64 tensors and a reverse-mode tape with the handful of
//!   ops the search space and the kernel lab need.
//! - [`batchnorm`]: BatchNorm in train / eval / stochastic mode, the γ/σ
//!   Lipschitz scale and the gradient-norm bound checker.
//! - [`space`]: the 5-op, 6-edge cell space, fair / biased BN placement,
//!   the weight-sharing supernet and checkpoints.
//! - [`train`]: synthetic datasets and BN-only / full training.
//! - [`indicators`]: γ, expressivity, trainability and uncertainty scores and
//!   the average-rank composite.
//! - [`ntk`]: empirical and limiting neural tangent kernels of BN-only
//!   fully-connected networks.
//! - [`search`]: random and evolutionary search.
//! - [`stats`] and [`experiment`]: rank correlations and experiment drivers.

pub mod batchnorm;
pub mod error;
pub mod experiment;
pub mod indicators;
pub mod io;
pub mod ntk;
pub mod rng;
pub mod search;
pub mod space;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngState;
