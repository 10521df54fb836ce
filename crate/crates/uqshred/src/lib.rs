//! Distributional reconstruction of high-dimensional spatiotemporal fields
//! from sparse sensor histories.
//!
//! A recurrent encoder consumes a lag window of sensor readings with a
//! Gaussian noise vector concatenated at every step, and a shallow decoder
//! maps the final hidden state to the full field. Training minimizes an
//! energy-score loss over two independent noise draws per sample, which makes
//! the network a conditional sampler: at inference, repeated forward passes
//! with resampled noise yield an empirical predictive distribution from which
//! means, variances, quantiles, and prediction intervals are read off.
//!
//! Module map:
//! - [`tensor`]: dense f64 arrays with tape-based reverse-mode autodiff
//! - [`model`]: GRU/LSTM temporal unit + shallow decoder, checkpoints
//! - [`training`]: energy-score loss, Adam, the training loop
//! - [`inference`]: Monte Carlo sampling and plug-in quantile summaries
//! - [`metrics`]: coverage, CRPS, sharpness, RMSE, energy distance
//! - [`data`]: synthetic field generators, windowing, normalization, file I/O
//! - [`cli`]: the `synth`/`train`/`eval`/`ablate` pipeline commands

pub mod cli;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
