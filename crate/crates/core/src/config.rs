//! TOML run configuration.
//!
//! A `RunConfig` describes one simulation: the cluster, the policies and the
//! workload. Every table rejects unknown keys. Minimal example:
//!
//! ```toml
//! seed = 7
//! mode = "collocated"          # or "pd_disaggregated"
//! dispatch_policy = "slo_aware" # or "round_robin"
//! workers = 2
//!
//! [model]
//! profile = "7B"
//!
//! [workload]
//! task_set = "4task"
//! qps = 16.0
//! requests_per_task = 100
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dispatch::DispatcherConfig;
use crate::error::{Error, Result};
use crate::priority::PriorityConfig;
use crate::scaler::{ProvisioningDelays, ScalerConfig};
use crate::sim::{KvLinkModel, Mode, Policy, SimConfig};
use crate::workload::{self, Request, TaskSpec};
use crate::LatencyModel;

/// Latency model: a built-in profile name or six explicit coefficients
/// `[a, b, c, a', b', c']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub coefficients: Option<[f64; 6]>,
    /// Coefficients the scheduler predicts with, when they differ from the
    /// simulated ground truth.
    #[serde(default)]
    pub scheduler_coefficients: Option<[f64; 6]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            profile: Some("7B".into()),
            coefficients: None,
            scheduler_coefficients: None,
        }
    }
}

fn from_coefficients(c: [f64; 6]) -> Result<LatencyModel> {
    LatencyModel::new(c[0], c[1], c[2], c[3], c[4], c[5])
}

impl ModelConfig {
    pub fn oracle(&self) -> Result<LatencyModel> {
        match (&self.profile, self.coefficients) {
            (Some(_), Some(_)) => Err(Error::Config(
                "model: set either `profile` or `coefficients`, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "model: missing `profile` or `coefficients`".into(),
            )),
            (Some(name), None) => LatencyModel::profile(name),
            (None, Some(c)) => from_coefficients(c),
        }
    }

    pub fn scheduler(&self) -> Result<LatencyModel> {
        match self.scheduler_coefficients {
            Some(c) => from_coefficients(c),
            None => self.oracle(),
        }
    }

    /// Provisioning delays of the named profile; 7B timings for custom models.
    pub fn provisioning(&self) -> ProvisioningDelays {
        self.profile
            .as_deref()
            .and_then(|p| ProvisioningDelays::for_model(&p.to_ascii_uppercase()))
            .or_else(|| ProvisioningDelays::for_model("7B"))
            .expect("built-in profile")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalPattern {
    /// Constant-rate Poisson arrivals, `requests_per_task` per task.
    #[default]
    Poisson,
    /// Lowest priority first, one more task every `stagger_s`; `qps` is per task.
    Ramp,
    /// Alternating phases at `qps` and `low_qps`, `phase_s` each.
    Bursty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub task_set: String,
    /// Explicit task list, replacing `task_set`.
    pub tasks: Option<Vec<TaskSpec>>,
    pub qps: f64,
    pub requests_per_task: usize,
    /// Requests carry priorities instead of explicit SLOs.
    pub priority_mode: bool,
    pub pattern: ArrivalPattern,
    pub stagger_s: f64,
    pub end_s: f64,
    pub low_qps: f64,
    pub phase_s: f64,
    pub phases: usize,
    /// Replay a trace CSV instead of generating arrivals. Relative paths
    /// resolve against the config file.
    pub trace: Option<PathBuf>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            task_set: "4task".into(),
            tasks: None,
            qps: 16.0,
            requests_per_task: 100,
            priority_mode: false,
            pattern: ArrivalPattern::Poisson,
            stagger_s: 20.0,
            end_s: 90.0,
            low_qps: 8.0,
            phase_s: 20.0,
            phases: 6,
            trace: None,
        }
    }
}

impl WorkloadConfig {
    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        match &self.tasks {
            Some(t) if t.is_empty() => Err(Error::Config("workload.tasks is empty".into())),
            Some(t) => Ok(t.clone()),
            None => workload::task_set(&self.task_set),
        }
    }

    /// Builds the request trace for `seed`.
    pub fn trace(
        &self,
        tasks: &[TaskSpec],
        seed: u64,
        base_dir: Option<&Path>,
    ) -> Result<Vec<Request>> {
        if let Some(path) = &self.trace {
            let path = match base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.clone(),
            };
            let file = std::fs::File::open(&path)?;
            return workload::read_trace(file, tasks);
        }
        match self.pattern {
            ArrivalPattern::Poisson => workload::generate(
                tasks,
                self.requests_per_task,
                self.qps,
                seed,
                self.priority_mode,
            ),
            ArrivalPattern::Ramp => {
                let segs = workload::ramp_segments(tasks, self.qps, self.stagger_s, self.end_s);
                workload::generate_segments(tasks, &segs, seed, self.priority_mode)
            }
            ArrivalPattern::Bursty => {
                let segs = workload::bursty_segments(
                    tasks,
                    self.qps,
                    self.low_qps,
                    self.phase_s,
                    self.phases,
                );
                workload::generate_segments(tasks, &segs, seed, self.priority_mode)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.qps > 0.0) || !self.qps.is_finite() {
            return Err(Error::Config(format!(
                "workload.qps must be > 0, got {}",
                self.qps
            )));
        }
        if self.trace.is_none() {
            match self.pattern {
                ArrivalPattern::Poisson if self.requests_per_task == 0 => {
                    return Err(Error::Config(
                        "workload.requests_per_task must be > 0".into(),
                    ))
                }
                ArrivalPattern::Ramp if !(self.stagger_s >= 0.0 && self.end_s > 0.0) => {
                    return Err(Error::Config(
                        "workload ramp needs stagger_s >= 0 and end_s > 0".into(),
                    ))
                }
                ArrivalPattern::Bursty
                    if !(self.low_qps > 0.0 && self.phase_s > 0.0 && self.phases > 0) =>
                {
                    return Err(Error::Config(
                        "workload bursty needs low_qps > 0, phase_s > 0, phases > 0".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// One simulation run as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub dispatch_policy: Policy,
    pub workers: usize,
    pub prefill_workers: usize,
    pub decode_workers: usize,
    pub kv_capacity: u64,
    pub decision_latency_s: f64,
    pub stall_timeout_s: f64,
    pub deadline_s: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub scaler_enabled: bool,
    pub model: ModelConfig,
    pub link: KvLinkModel,
    pub dispatcher: DispatcherConfig,
    pub scaler: ScalerConfig,
    /// Overrides the model's built-in provisioning delays.
    pub provisioning: Option<ProvisioningDelays>,
    pub workload: WorkloadConfig,
    pub priority: PriorityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Collocated,
            dispatch_policy: Policy::SloAware,
            workers: 2,
            prefill_workers: 1,
            decode_workers: 1,
            kv_capacity: 16384,
            decision_latency_s: 0.0,
            stall_timeout_s: 60.0,
            deadline_s: None,
            output_dir: None,
            scaler_enabled: false,
            model: ModelConfig::default(),
            link: KvLinkModel::default(),
            dispatcher: DispatcherConfig::default(),
            scaler: ScalerConfig::default(),
            provisioning: None,
            workload: WorkloadConfig::default(),
            priority: PriorityConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates. Parse errors carry the offending line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.sim_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Resolves the simulation parameters, validating everything.
    pub fn sim_config(&self) -> Result<SimConfig> {
        self.workload.validate()?;
        let mut cfg = SimConfig::new(self.model.oracle()?, self.workload.tasks()?, self.workers);
        cfg.scheduler_model = self.model.scheduler()?;
        cfg.mode = self.mode;
        cfg.policy = self.dispatch_policy;
        cfg.prefill_workers = self.prefill_workers;
        cfg.decode_workers = self.decode_workers;
        cfg.kv_capacity = self.kv_capacity;
        cfg.link = self.link;
        cfg.dispatcher = self.dispatcher.clone();
        cfg.scaler = self.scaler_enabled.then(|| self.scaler.clone());
        cfg.provisioning = self
            .provisioning
            .unwrap_or_else(|| self.model.provisioning());
        cfg.priority = self.workload.priority_mode.then(|| self.priority.clone());
        cfg.decision_latency_s = self.decision_latency_s;
        cfg.stall_timeout_s = self.stall_timeout_s;
        cfg.deadline_s = self.deadline_s;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves() {
        let cfg = RunConfig::from_toml("seed = 3\n[workload]\nqps = 8.0\nrequests_per_task = 5\n")
            .unwrap();
        let sim = cfg.sim_config().unwrap();
        assert_eq!(sim.seed, 3);
        assert_eq!(sim.tasks.len(), 4);
        assert!(sim.scaler.is_none() && sim.priority.is_none());
        let trace = cfg.workload.trace(&sim.tasks, cfg.seed, None).unwrap();
        assert_eq!(trace.len(), 20);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::from_toml("seed = 1\nworkers = 2\nwrokers = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Toml(_)));
        assert!(msg.contains("line 3"), "{msg}");
        assert!(RunConfig::from_toml("[dispatcher]\ntheta = 0.5\nbogus = 1\n").is_err());
    }

    #[test]
    fn model_selection() {
        assert!(matches!(
            RunConfig::from_toml("[model]\nprofile = \"13B\"\n"),
            Err(Error::UnknownModelProfile(_))
        ));
        assert!(RunConfig::from_toml("[model]\n").is_err());
        let cfg =
            RunConfig::from_toml("[model]\ncoefficients = [0.01, 1e-4, 0.0, 0.01, 1e-6, 1e-4]\n")
                .unwrap();
        assert_eq!(cfg.sim_config().unwrap().oracle.a, 0.01);
        let cfg = RunConfig::from_toml("[model]\nprofile = \"70b\"\n").unwrap();
        assert_eq!(cfg.sim_config().unwrap().provisioning.disk, 22.58);
    }

    #[test]
    fn scaler_and_priority_toggles() {
        let text = "workers = 2\nscaler_enabled = true\n[scaler]\nmax_workers = 4\n[workload]\npriority_mode = true\n";
        let sim = RunConfig::from_toml(text).unwrap().sim_config().unwrap();
        assert_eq!(sim.scaler.unwrap().max_workers, 4);
        assert_eq!(sim.priority.unwrap().window_size, 50);
        // initial workers outside the scaler range
        assert!(RunConfig::from_toml("workers = 9\nscaler_enabled = true\n").is_err());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml("workers = 0\n").is_err());
        assert!(RunConfig::from_toml("[workload]\nqps = -1.0\n").is_err());
        assert!(RunConfig::from_toml("mode = \"split\"\n").is_err());
    }
}
