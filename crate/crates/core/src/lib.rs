//! Gaussian-process early-warning engine for weekly disease incidence.
//!
//! The crate estimates epidemiological data that is not yet available from a
//! social-media proxy signal, decides per city whether those estimates are
//! trustworthy, and forecasts incidence a fixed number of weeks ahead. The
//! [`experiment`] module drives a rolling-origin backtest that compares the
//! proxy-augmented forecasts against simply forecasting further ahead from the
//! stale data.

pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod forecaster;
pub mod gate;
pub mod gp;
pub mod kernels;
pub mod nowcaster;
pub mod par;

pub use data_model::{CitySeries, IncidenceLevel, TransformedSeries};
pub use error::{Error, Result};
pub use gp::{GpModel, OptimizerConfig, Prediction, TrainingData};
pub use kernels::{KernelHyperparams, KernelSpec};
