//! SAGE: joint Bayesian inference of phase segmentation and piecewise
//! Gaussian-process property models over a shared domain.
//!
//! The library fuses labeled structure data (phase labels at points) with
//! scalar property measurements. A segmentation model (1-D sorted
//! changepoints, or N-D softmax of latent Matérn GPs) carves the domain into
//! regions; each (property, region) pair carries its own RBF GP; blockwise
//! Metropolis MCMC targets the joint posterior and posterior summaries give
//! phase maps with uncertainty plus piecewise property predictions.
//!
//! Entry points:
//! - [`data`]: datasets, domains, prediction grids, prior configuration, CSV I/O
//! - [`inference`]: MCMC engine, model assembly, chain running
//! - [`posterior`]: summaries, predictive intervals, exports
//! - [`baselines`]: single-GP MLE references (regression, changepoint kernel,
//!   classification)
//! - [`synth`]: synthetic benchmark generators and evaluation metrics

pub use nalgebra;
pub use rand;
pub use rand_chacha;
pub use rand_distr;

pub mod baselines;
pub mod data;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod par;
pub mod posterior;
pub mod property;
pub mod sage;
pub mod segmentation;
pub mod synth;

pub use error::{Result, SageError};
