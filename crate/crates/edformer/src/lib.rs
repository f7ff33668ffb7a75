//! Multivariate time-series forecasting engine built around seasonal/trend
//! decomposition and a variate-token transformer encoder, with a training
//! harness, evaluation metrics, and a post-hoc attribution suite.
//!
//! The crate is organized as:
//!
//! - [`engine`]: reverse-mode autodiff tensor core and the Adam optimizer
//! - [`decompose`]: moving-average seasonal/trend split
//! - [`model`]: the forecasting network itself
//! - [`data`]: CSV ingestion, standardization, chronological splits, windows
//! - [`train`]: mini-batch training loop, checkpoints, evaluation, speed bench
//! - [`metrics`]: MSE/MAE and cross-horizon aggregation
//! - [`explain`]: attribution methods (FA, FO, IG, GS, WinIT) and
//!   comprehensiveness/sufficiency faithfulness scoring
//! - [`cli`]: the command-line surface
//!
//! All numeric work is `f64`. Every computation is deterministic for a fixed
//! seed; the `EDFORMER_THREADS` environment variable caps internal parallelism
//! (default 1) and changing it does not change results, only timing.

pub mod cli;
pub mod data;
pub mod decompose;
pub mod engine;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod series;
pub mod train;

pub use error::{Error, Result};
pub use series::SeriesBatch;
