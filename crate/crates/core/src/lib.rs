//! Selective patch representations for patch-based time-series forecasting.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: reverse-mode tape, parameters, finite-difference checks
//! - [`data`]: CSV ingestion, splits, windows, normalization, synthetic series
//! - [`patching`]: patch geometry, adjacent and stride-1 candidate patches
//! - [`srs`]: scorers, passthrough selection, reassembly, fusion, positions
//! - [`models`]: SRSNet, ablations, the transformer plugin host, checkpoints
//! - [`train`]: Adam, early-stopped training, overhead measurement
//! - [`eval`]: metrics, configuration, experiments, sweeps, trace rendering
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! element type for the common cases.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod models;
pub mod nn;
pub mod patching;
pub mod scalar;
pub mod srs;
pub mod train;

pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Forecaster32 = models::Forecaster<f32>;
pub type Forecaster64 = models::Forecaster<f64>;
