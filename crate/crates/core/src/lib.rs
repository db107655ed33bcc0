//! Federated-learning experiment harness: data partitioning, local models,
//! server-side aggregation strategies, a framed client/server protocol,
//! experiment storage and resource monitoring.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the protocol and storage
//! layers use.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod monitor;
pub mod params;
pub mod partition;
pub mod protocol;
pub mod scalar;
pub mod storage;
pub mod strategies;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParamVector = params::Params<f64>;
pub type ParamVectorF32 = params::Params<f32>;
pub type Dataset = data::Dataset<f64>;
pub type FitResult = strategies::FitResult<f64>;
pub type EvalResult = strategies::EvalResult<f64>;
pub type MetricsReport = metrics::MetricsReport<f64>;
pub type StrategyState = strategies::StrategyState<f64>;
