//! Multi-SLO LLM serving: latency model, SLO-aware dispatching, KV
//! migration, priority-based SLO mapping, autoscaling, and a deterministic
//! discrete-event simulator to drive them.
//!
//! The numeric core is generic over the float type through [`scalar::Scalar`];
//! the aliases below fix it to `f64` (or `f32`).

pub mod config;
pub mod dispatch;
pub mod error;
pub mod latency;
pub mod linalg;
pub mod metrics;
pub mod migrator;
pub mod priority;
pub mod scalar;
pub mod scaler;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};

pub type LatencyModel = latency::LatencyModel<f64>;
pub type LatencyModelF32 = latency::LatencyModel<f32>;
pub type SloSpec = workload::SloSpec<f64>;
pub type SloSpecF32 = workload::SloSpec<f32>;
