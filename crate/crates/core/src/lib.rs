//! Fraction-wise distilled diffusion priors over multivariate time series,
//! classifier-guided counterfactual generation and the evaluation metrics
//! used to judge the resulting explanations.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod counterfactual;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod prior;
pub mod sample;
pub mod schedule;

pub use error::{Error, Result};
pub use sample::{Mat, Sample};
