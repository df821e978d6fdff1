//! Discrete-event simulation of a serving cluster.

mod engine;
pub mod log;
pub mod worker;

use serde::{Deserialize, Serialize};

use crate::dispatch::DispatcherConfig;
use crate::error::{Error, Result};
use crate::metrics::{RequestResult, RunReport, Span};
use crate::priority::PriorityConfig;
use crate::scaler::{ProvisioningDelays, ScalerConfig};
use crate::workload::{Request, TaskSpec};
use crate::LatencyModel;

pub use log::LogEntry;
pub use worker::Role;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Collocated,
    PdDisaggregated,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    SloAware,
    RoundRobin,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::SloAware => "slo_aware",
            Policy::RoundRobin => "round_robin",
        }
    }
}

/// Delay of moving a request's KV cache between workers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvLinkModel {
    pub base_latency_s: f64,
    pub per_token_s: f64,
}

impl Default for KvLinkModel {
    fn default() -> Self {
        Self {
            base_latency_s: 0.005,
            per_token_s: 1e-6,
        }
    }
}

impl KvLinkModel {
    pub fn delay(&self, tokens: u64) -> f64 {
        self.base_latency_s + self.per_token_s * tokens as f64
    }
}

/// Fully resolved simulation parameters.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub mode: Mode,
    pub policy: Policy,
    /// Ground-truth step latencies.
    pub oracle: LatencyModel,
    /// Model the schedulers predict with.
    pub scheduler_model: LatencyModel,
    pub tasks: Vec<TaskSpec>,
    /// Initial collocated workers.
    pub workers: usize,
    pub prefill_workers: usize,
    pub decode_workers: usize,
    pub kv_capacity: u64,
    pub link: KvLinkModel,
    pub dispatcher: DispatcherConfig,
    pub scaler: Option<ScalerConfig>,
    pub provisioning: ProvisioningDelays,
    /// Present in priority mode.
    pub priority: Option<PriorityConfig>,
    /// Delay between a dispatch decision and the worker receiving it.
    pub decision_latency_s: f64,
    /// Simulated time without progress after which the run is declared stuck.
    pub stall_timeout_s: f64,
    pub deadline_s: Option<f64>,
    pub seed: u64,
    pub record_log: bool,
}

impl SimConfig {
    /// Defaults around `oracle` with a collocated cluster of `workers`.
    pub fn new(oracle: LatencyModel, tasks: Vec<TaskSpec>, workers: usize) -> Self {
        Self {
            mode: Mode::Collocated,
            policy: Policy::SloAware,
            oracle,
            scheduler_model: oracle,
            tasks,
            workers,
            prefill_workers: 1,
            decode_workers: 1,
            kv_capacity: 16384,
            link: KvLinkModel::default(),
            dispatcher: DispatcherConfig::default(),
            scaler: None,
            provisioning: ProvisioningDelays::for_model("7B").expect("built-in"),
            priority: None,
            decision_latency_s: 0.0,
            stall_timeout_s: 60.0,
            deadline_s: None,
            seed: 0,
            record_log: true,
        }
    }

    pub fn initial_workers(&self) -> usize {
        match self.mode {
            Mode::Collocated => self.workers,
            Mode::PdDisaggregated => self.prefill_workers + self.decode_workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.scheduler_model.validate()?;
        self.dispatcher.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        match self.mode {
            Mode::Collocated if self.workers == 0 => {
                return Err(Error::Config("workers must be >= 1".into()))
            }
            Mode::PdDisaggregated if self.prefill_workers == 0 || self.decode_workers == 0 => {
                return Err(Error::Config(
                    "prefill_workers and decode_workers must be >= 1".into(),
                ))
            }
            _ => {}
        }
        if self.kv_capacity == 0 {
            return Err(Error::Config("kv_capacity must be > 0".into()));
        }
        if !(self.link.base_latency_s >= 0.0 && self.link.per_token_s >= 0.0) {
            return Err(Error::Config("link latencies must be >= 0".into()));
        }
        if !(self.decision_latency_s >= 0.0) || !self.decision_latency_s.is_finite() {
            return Err(Error::Config("decision_latency_s must be >= 0".into()));
        }
        if !(self.stall_timeout_s > 0.0) {
            return Err(Error::Config("stall_timeout_s must be > 0".into()));
        }
        if let Some(d) = self.deadline_s {
            if !(d > 0.0) {
                return Err(Error::Config("deadline_s must be > 0".into()));
            }
        }
        self.provisioning.validate()?;
        if let Some(s) = &self.scaler {
            s.validate()?;
            let initial = self.initial_workers();
            if initial < s.min_workers || initial > s.max_workers {
                return Err(Error::Config(format!(
                    "initial worker count {initial} outside scaler range [{}, {}]",
                    s.min_workers, s.max_workers
                )));
            }
            if self.mode == Mode::PdDisaggregated && s.min_workers < 2 {
                return Err(Error::Config(
                    "disaggregated scaling needs min_workers >= 2".into(),
                ));
            }
        }
        if let Some(p) = &self.priority {
            if p.window_size == 0 {
                return Err(Error::Config("window_size must be > 0".into()));
            }
            if let Some(b) = &p.bounds {
                b.validate()?;
            }
        }
        Ok(())
    }
}

/// Counters collected during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub prefill_steps: u64,
    pub decode_steps: u64,
    /// Decode steps whose latency exceeded the smallest TPOT in the batch.
    pub decode_slo_violations: u64,
    /// Decode assignments made before the request's prefill finished.
    pub one_shot_violations: u64,
    pub migrations: u64,
    pub scale_outs: u64,
    pub scale_ins: u64,
    pub role_changes: u64,
    pub dispatch_rounds: u64,
    pub events: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Requests with their recorded timestamps, in trace order.
    pub requests: Vec<Request>,
    pub results: Vec<RequestResult>,
    pub spans: Vec<Span>,
    pub log: Vec<LogEntry>,
    pub stats: SimStats,
    pub end_time: f64,
}

impl SimOutput {
    pub fn report(&self) -> RunReport {
        let mut rep = crate::metrics::summarize(&self.results, &self.spans);
        let s = &self.stats;
        for (k, v) in [
            ("prefill_steps", s.prefill_steps),
            ("decode_steps", s.decode_steps),
            ("decode_slo_violations", s.decode_slo_violations),
            ("one_shot_violations", s.one_shot_violations),
            ("migrations", s.migrations),
            ("scale_outs", s.scale_outs),
            ("scale_ins", s.scale_ins),
            ("role_changes", s.role_changes),
        ] {
            rep.stats.insert(k.to_string(), v as f64);
        }
        rep.stats.insert("end_time_s".to_string(), self.end_time);
        rep
    }

    pub fn incomplete(&self) -> usize {
        self.results
            .iter()
            .filter(|r| r.completion.is_none())
            .count()
    }
}

/// Runs `trace` to completion (or the deadline).
pub fn run(cfg: &SimConfig, trace: &[Request]) -> Result<SimOutput> {
    cfg.validate()?;
    engine::Engine::new(cfg, trace)?.run()
}
