//! Request dispatch: the SLO-aware dispatcher and the round-robin baseline.

pub mod budget;
pub mod queue;
pub mod round_robin;
pub mod slo_aware;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use round_robin::RoundRobin;
pub use slo_aware::{
    OutputEstimator, QueuedRequest, Resident, SloAwareDispatcher, Stage, WorkerSnapshot,
};

/// Tunables of the SLO-aware dispatcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatcherConfig {
    /// Minimum admission score.
    pub theta: f64,
    /// Weight of KV utilization in the admission score.
    pub util_weight: f64,
    /// Period of monitor snapshots feeding the dispatcher.
    pub sync_interval_s: f64,
    /// How far an idle worker's maturity is pushed when nothing was dispatched.
    pub poll_interval_s: f64,
    /// Upper bound on tokens admitted per round when the prefill cost has no
    /// per-token term.
    pub max_budget: u64,
    /// Smoothing factor of the per-task output-length estimate.
    pub output_ema_alpha: f64,
}

impl Default for DispatcherConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            util_weight: 0.5,
            sync_interval_s: 0.1,
            poll_interval_s: 0.01,
            max_budget: 1 << 20,
            output_ema_alpha: 0.1,
        }
    }
}

impl DispatcherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("dispatcher: {what}")));
        if !(0.0..=1.0).contains(&self.theta) {
            return bad("theta must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.util_weight) {
            return bad("util_weight must be in [0, 1]");
        }
        if !(self.sync_interval_s > 0.0) || !self.sync_interval_s.is_finite() {
            return bad("sync_interval_s must be > 0");
        }
        if !(self.poll_interval_s > 0.0) || !self.poll_interval_s.is_finite() {
            return bad("poll_interval_s must be > 0");
        }
        if self.max_budget == 0 {
            return bad("max_budget must be > 0");
        }
        if !(self.output_ema_alpha > 0.0 && self.output_ema_alpha <= 1.0) {
            return bad("output_ema_alpha must be in (0, 1]");
        }
        Ok(())
    }
}

/// Outcome of one dispatch round.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchDecision {
    pub worker: usize,
    /// Request ids sent to `worker`, in queue order.
    pub admitted: Vec<u64>,
    /// Token limit the round was run under.
    pub token_limit: u64,
    /// Maturity time the worker was reinserted with.
    pub maturity: f64,
}
