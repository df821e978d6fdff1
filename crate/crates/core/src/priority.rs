//! Priority-to-SLO mapping from a sliding window of recently observed
//! latencies.
//!
//! Completed requests feed two sorted windows (TTFT with its queue time, and
//! TPOT). A new request of priority `p` reads the entry at a position biased
//! toward the low-latency end for high priorities, corrects the TTFT for the
//! change in queueing delay, and clamps to per-priority bounds.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{SloSpec, TaskSpec};

/// Window position for priority `p` given per-priority record counts.
///
/// Returns `None` when the window is empty. `p` must be below
/// `counts.len()`.
pub fn priority_index(p: usize, counts: &[usize]) -> Option<usize> {
    let n = counts.len();
    assert!(p < n, "priority {p} out of range for {n} levels");
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let base: usize = counts[..p].iter().sum();
    // floor((p+1) * C_p / (N+1)) in integers
    let offset = (p + 1) * counts[p] / (n + 1);
    Some((base + offset).min(total - 1))
}

/// Allowed SLO range for one priority level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min_ttft: f64,
    pub max_ttft: f64,
    pub min_tpot: f64,
    pub max_tpot: f64,
}

impl Bounds {
    /// `nominal` scaled by `1 - spread` and `1 + spread`.
    pub fn around(nominal: SloSpec<f64>, spread: f64) -> Self {
        Self {
            min_ttft: nominal.ttft * (1.0 - spread),
            max_ttft: nominal.ttft * (1.0 + spread),
            min_tpot: nominal.tpot * (1.0 - spread),
            max_tpot: nominal.tpot * (1.0 + spread),
        }
    }

    pub fn midpoint(&self) -> SloSpec<f64> {
        SloSpec {
            ttft: 0.5 * (self.min_ttft + self.max_ttft),
            tpot: 0.5 * (self.min_tpot + self.max_tpot),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_ttft > 0.0
            && self.min_tpot > 0.0
            && self.min_ttft <= self.max_ttft
            && self.min_tpot <= self.max_tpot
            && self.max_ttft.is_finite()
            && self.max_tpot.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid priority bounds {self:?}")))
        }
    }
}

/// Per-priority bounds, indexed by priority level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorityBounds(pub Vec<Bounds>);

impl PriorityBounds {
    /// Bounds centered on each priority's task SLO. When several tasks share a
    /// level the first one listed wins.
    pub fn from_tasks(tasks: &[TaskSpec], spread: f64) -> Result<Self> {
        let levels = tasks
            .iter()
            .map(|t| t.priority as usize + 1)
            .max()
            .unwrap_or(0);
        let mut out: Vec<Option<Bounds>> = vec![None; levels];
        for t in tasks {
            let slot = &mut out[t.priority as usize];
            if slot.is_none() {
                *slot = Some(Bounds::around(t.slo, spread));
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(p, b)| {
                b.ok_or_else(|| Error::Config(format!("no task defines priority level {p}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, p: usize) -> &Bounds {
        &self.0[p]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("priority bounds table is empty".into()));
        }
        self.0.iter().try_for_each(Bounds::validate)
    }
}

/// Latencies observed for one completed request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub priority: usize,
    pub ttft: f64,
    pub tpot: f64,
    pub queue_time: f64,
    pub completed_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    seq: u64,
    obs: Observation,
}

/// Sorted sliding windows of recent TTFT and TPOT observations.
#[derive(Debug, Clone)]
pub struct SloWindow {
    capacity: usize,
    next_seq: u64,
    /// Entries ordered by completion time, oldest first.
    by_age: VecDeque<Entry>,
    /// `(ttft, queue_time, seq)` ascending.
    ttft: Vec<(f64, f64, u64)>,
    /// `(tpot, seq)` ascending.
    tpot: Vec<(f64, u64)>,
    counts: Vec<usize>,
}

impl SloWindow {
    pub fn new(capacity: usize, levels: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            next_seq: 0,
            by_age: VecDeque::with_capacity(capacity + 1),
            ttft: Vec::with_capacity(capacity + 1),
            tpot: Vec::with_capacity(capacity + 1),
            counts: vec![0; levels],
        }
    }

    pub fn len(&self) -> usize {
        self.by_age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_age.is_empty()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn ttft_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.ttft.iter().map(|e| e.0)
    }

    pub fn tpot_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tpot.iter().map(|e| e.0)
    }

    pub fn priorities(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_age.iter().map(|e| e.obs.priority)
    }

    pub fn insert(&mut self, obs: Observation) {
        assert!(
            obs.priority < self.counts.len(),
            "priority {} out of range",
            obs.priority
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        let entry = Entry { seq, obs };
        let pos = self
            .by_age
            .partition_point(|e| e.obs.completed_at <= obs.completed_at);
        self.by_age.insert(pos, entry);
        let key = (obs.ttft, obs.queue_time, seq);
        let i = self
            .ttft
            .partition_point(|e| e.0.total_cmp(&key.0).then(e.2.cmp(&seq)).is_lt());
        self.ttft.insert(i, key);
        let i = self
            .tpot
            .partition_point(|e| e.0.total_cmp(&obs.tpot).then(e.1.cmp(&seq)).is_lt());
        self.tpot.insert(i, (obs.tpot, seq));
        self.counts[obs.priority] += 1;

        while self.by_age.len() > self.capacity {
            let old = self.by_age.pop_front().expect("non-empty");
            self.ttft.retain(|e| e.2 != old.seq);
            self.tpot.retain(|e| e.1 != old.seq);
            self.counts[old.obs.priority] -= 1;
        }
    }

    /// `(ttft, queue_time)` and `tpot` at window position `index`.
    fn at(&self, index: usize) -> ((f64, f64), f64) {
        let t = self.ttft[index];
        ((t.0, t.1), self.tpot[index].0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorityConfig {
    pub window_size: usize,
    /// Relative half-width of the default bounds around each task's SLO.
    pub bounds_spread: f64,
    /// Explicit bounds table; overrides the spread-derived defaults.
    pub bounds: Option<PriorityBounds>,
}

impl Default for PriorityConfig {
    fn default() -> Self {
        Self {
            window_size: 50,
            bounds_spread: 0.25,
            bounds: None,
        }
    }
}

/// Assigns SLO targets to priority-tagged requests.
#[derive(Debug, Clone)]
pub struct PriorityMapper {
    window: SloWindow,
    bounds: PriorityBounds,
    last_queue_time: Vec<Option<f64>>,
}

impl PriorityMapper {
    pub fn new(window_size: usize, bounds: PriorityBounds) -> Result<Self> {
        bounds.validate()?;
        if window_size == 0 {
            return Err(Error::Config("window_size must be > 0".into()));
        }
        let levels = bounds.levels();
        Ok(Self {
            window: SloWindow::new(window_size, levels),
            bounds,
            last_queue_time: vec![None; levels],
        })
    }

    pub fn window(&self) -> &SloWindow {
        &self.window
    }

    pub fn bounds(&self) -> &PriorityBounds {
        &self.bounds
    }

    /// SLO for a new request of priority `p`. With `higher_pending`, the
    /// request is relaxed to the level's maximum so it yields to the more
    /// urgent queued work.
    pub fn assign_slo(&mut self, p: usize, higher_pending: bool) -> SloSpec<f64> {
        let b = *self.bounds.get(p);
        let mid = b.midpoint();
        let (ttft, tpot) = match priority_index(p, self.window.counts()) {
            None => (mid.ttft, mid.tpot),
            Some(idx) => {
                let ((ttft, q_time), tpot) = self.window.at(idx);
                let correction = self.last_queue_time[p].map_or(0.0, |last| q_time - last);
                self.last_queue_time[p] = Some(q_time);
                (ttft - correction, tpot)
            }
        };
        let (lo_ttft, lo_tpot) = if higher_pending {
            (b.max_ttft, b.max_tpot)
        } else {
            (b.min_ttft, b.min_tpot)
        };
        SloSpec {
            ttft: clamp(ttft, lo_ttft, b.max_ttft),
            tpot: clamp(tpot, lo_tpot, b.max_tpot),
        }
    }

    pub fn record_completion(&mut self, obs: Observation) {
        self.window.insert(obs);
    }
}

fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    if x.is_nan() {
        lo
    } else {
        x.max(lo).min(hi)
    }
}
