//! Threshold autoscaling, provisioning delays, and prefill/decode role
//! rebalancing. Everything here is a pure decision function; the simulator
//! owns the workers and applies the actions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a scaled-out worker loads its weights from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProvisioningMode {
    /// Device-to-device transfer from a running worker.
    #[default]
    Fast,
    CpuOffload,
    Disk,
}

/// Time-to-ready in seconds for each provisioning mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisioningDelays {
    pub fast: f64,
    pub cpu_offload: f64,
    pub disk: f64,
}

impl ProvisioningDelays {
    /// Measured delays for the built-in model sizes.
    pub fn for_model(model: &str) -> Option<Self> {
        let (fast, cpu_offload, disk) = match model {
            "7B" => (0.89, 2.73, 4.14),
            "32B" => (2.05, 19.41, 28.84),
            "70B" => (1.16, 11.50, 22.58),
            _ => return None,
        };
        Some(Self {
            fast,
            cpu_offload,
            disk,
        })
    }

    pub fn delay(&self, mode: ProvisioningMode) -> f64 {
        match mode {
            ProvisioningMode::Fast => self.fast,
            ProvisioningMode::CpuOffload => self.cpu_offload,
            ProvisioningMode::Disk => self.disk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fast, self.cpu_offload, self.disk];
        if all.iter().all(|d| d.is_finite() && *d >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "provisioning delays must be finite and >= 0: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalerConfig {
    pub tau_s: f64,
    pub eps_out: f64,
    pub eps_in: f64,
    pub min_workers: usize,
    pub max_workers: usize,
    pub scale_in_patience: u32,
    pub provisioning_mode: ProvisioningMode,
    /// Overrides the per-model table.
    pub provisioning_delays: Option<ProvisioningDelays>,
    /// Probability that a fast load fails and falls back to disk.
    pub fast_failure_prob: f64,
    /// Per-role load ratio that marks the roles as diverged.
    pub role_flip_ratio: f64,
    /// Consecutive diverged ticks before a worker changes role.
    pub role_flip_patience: u32,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        Self {
            tau_s: 1.0,
            eps_out: 1.2,
            eps_in: 0.5,
            min_workers: 1,
            max_workers: 8,
            scale_in_patience: 3,
            provisioning_mode: ProvisioningMode::Fast,
            provisioning_delays: None,
            fast_failure_prob: 0.0,
            role_flip_ratio: 2.0,
            role_flip_patience: 2,
        }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("scaler: {what}")));
        if !(self.tau_s > 0.0) || !self.tau_s.is_finite() {
            return bad("tau_s must be > 0");
        }
        if !(self.eps_in < self.eps_out) {
            return bad("eps_in must be < eps_out");
        }
        if self.min_workers == 0 || self.min_workers > self.max_workers {
            return bad("need 1 <= min_workers <= max_workers");
        }
        if !(0.0..=1.0).contains(&self.fast_failure_prob) {
            return bad("fast_failure_prob must be in [0, 1]");
        }
        if !(self.role_flip_ratio >= 1.0) {
            return bad("role_flip_ratio must be >= 1");
        }
        if let Some(d) = &self.provisioning_delays {
            d.validate()?;
        }
        Ok(())
    }
}

/// Lower bound on the processing rate used in the arrival/processing ratio.
pub const MIN_RATE: f64 = 1e-9;

/// Overall load: the largest of mean KV utilization, worst waiting time
/// relative to its TTFT target, and arrival rate over processing rate.
pub fn load_metric(
    utils: &[f64],
    wait_ratios: impl IntoIterator<Item = f64>,
    r_in: f64,
    r_process: f64,
) -> f64 {
    let mean_util = if utils.is_empty() {
        0.0
    } else {
        utils.iter().sum::<f64>() / utils.len() as f64
    };
    let worst_wait = wait_ratios.into_iter().fold(0.0_f64, f64::max);
    let rate = r_in / r_process.max(MIN_RATE);
    mean_util.max(worst_wait).max(rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleAction {
    ScaleOut,
    ScaleIn,
}

/// Threshold controller: at most one action per tick.
#[derive(Debug, Clone)]
pub struct Scaler {
    cfg: ScalerConfig,
    low_streak: u32,
}

impl Scaler {
    pub fn new(cfg: ScalerConfig) -> Self {
        Self { cfg, low_streak: 0 }
    }

    pub fn config(&self) -> &ScalerConfig {
        &self.cfg
    }

    /// `active` counts loading, running, and draining workers;
    /// `accepting` counts those that can be drained.
    pub fn tick(&mut self, metric: f64, active: usize, accepting: usize) -> Option<ScaleAction> {
        if metric > self.cfg.eps_out {
            self.low_streak = 0;
            return (active < self.cfg.max_workers).then_some(ScaleAction::ScaleOut);
        }
        if metric < self.cfg.eps_in {
            self.low_streak += 1;
            if self.low_streak >= self.cfg.scale_in_patience && accepting > self.cfg.min_workers {
                self.low_streak = 0;
                return Some(ScaleAction::ScaleIn);
            }
            return None;
        }
        self.low_streak = 0;
        None
    }
}

/// Pool that should receive a worker when per-role loads diverge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HotRole {
    Prefill,
    Decode,
}

#[derive(Debug, Clone)]
pub struct RoleBalancer {
    ratio: f64,
    patience: u32,
    floor: f64,
    streak: Option<(HotRole, u32)>,
}

impl RoleBalancer {
    /// `floor` is the load the hot role must exceed before a flip is considered.
    pub fn new(ratio: f64, patience: u32, floor: f64) -> Self {
        Self {
            ratio,
            patience: patience.max(1),
            floor,
            streak: None,
        }
    }

    pub fn tick(&mut self, prefill_load: f64, decode_load: f64) -> Option<HotRole> {
        let (hot, hot_load, cold_load) = if prefill_load >= decode_load {
            (HotRole::Prefill, prefill_load, decode_load)
        } else {
            (HotRole::Decode, decode_load, prefill_load)
        };
        if !(hot_load > self.floor && hot_load >= self.ratio * cold_load) {
            self.streak = None;
            return None;
        }
        let count = match self.streak {
            Some((h, c)) if h == hot => c + 1,
            _ => 1,
        };
        if count >= self.patience {
            self.streak = None;
            Some(hot)
        } else {
            self.streak = Some((hot, count));
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_metric_examples() {
        assert_eq!(load_metric(&[], [], 0.0, 0.0), 0.0);
        assert!((load_metric(&[0.9, 0.95], [], 5.0, 5.0) - 1.0).abs() < 1e-12);
        assert!(load_metric(&[0.1], [0.6 / 0.5], 0.0, 1.0) >= 1.2);
    }

    #[test]
    fn thresholds() {
        let mut s = Scaler::new(ScalerConfig::default());
        assert_eq!(s.tick(1.5, 2, 2), Some(ScaleAction::ScaleOut));
        assert_eq!(s.tick(1.2, 2, 2), None);
        assert_eq!(s.tick(0.3, 2, 2), None);
        assert_eq!(s.tick(0.3, 2, 2), None);
        assert_eq!(s.tick(0.3, 2, 2), Some(ScaleAction::ScaleIn));
    }

    #[test]
    fn patience_resets_on_normal_load() {
        let mut s = Scaler::new(ScalerConfig::default());
        s.tick(0.3, 2, 2);
        s.tick(0.3, 2, 2);
        s.tick(0.8, 2, 2);
        assert_eq!(s.tick(0.3, 2, 2), None);
    }

    #[test]
    fn respects_worker_limits() {
        let cfg = ScalerConfig {
            min_workers: 2,
            max_workers: 4,
            scale_in_patience: 1,
            ..Default::default()
        };
        let mut s = Scaler::new(cfg);
        assert_eq!(s.tick(2.0, 4, 4), None);
        assert_eq!(s.tick(0.1, 2, 2), None);
        assert_eq!(s.tick(0.1, 3, 3), Some(ScaleAction::ScaleIn));
    }

    #[test]
    fn provisioning_table() {
        let d = ProvisioningDelays::for_model("32B").unwrap();
        assert_eq!(d.delay(ProvisioningMode::Fast), 2.05);
        for m in ["7B", "32B", "70B"] {
            let d = ProvisioningDelays::for_model(m).unwrap();
            assert!(d.fast < d.cpu_offload && d.cpu_offload < d.disk, "{m}");
        }
        let d = ProvisioningDelays::for_model("70B").unwrap();
        assert!((d.disk / d.fast - 19.47).abs() < 0.01);
        assert!(ProvisioningDelays::for_model("13B").is_none());
    }

    #[test]
    fn role_flip_needs_two_diverged_ticks() {
        let mut b = RoleBalancer::new(2.0, 2, 0.5);
        assert_eq!(b.tick(1.5, 0.3), None);
        assert_eq!(b.tick(1.5, 0.3), Some(HotRole::Prefill));
        assert_eq!(b.tick(1.0, 0.9), None);
        assert_eq!(b.tick(0.1, 0.9), None);
        assert_eq!(b.tick(0.1, 0.9), Some(HotRole::Decode));
        // both idle: no flip
        assert_eq!(b.tick(0.0, 0.0), None);
        assert_eq!(b.tick(0.0, 0.0), None);
    }

    #[test]
    fn config_validation() {
        assert!(ScalerConfig::default().validate().is_ok());
        assert!(ScalerConfig {
            eps_in: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ScalerConfig {
            min_workers: 5,
            max_workers: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ScalerConfig {
            tau_s: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
