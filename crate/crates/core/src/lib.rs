//! Probabilistic forecasting of node-level time series on evolving graphs.
//!
//! The crate covers the whole pipeline: ingestion of long-format node
//! series, autoregressive base predictors with predictive variances (linear
//! AR and Gaussian-process regression), similarity graph construction with
//! variogram diagnostics, Gaussian conditional random fields (GCRF) that
//! combine base predictions over a graph, two uncertainty-aware variants
//! (uGCRF, ufGCRF), evaluation metrics and an experiment harness.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod ext;
pub mod gcrf;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod predictors;
pub mod similarity;
mod kvfile;
pub mod synth;
mod textfmt;

pub use error::{Error, Result};
