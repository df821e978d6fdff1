//! Simulated worker state.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Collocated,
    Prefill,
    Decode,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Collocated => "collocated",
            Role::Prefill => "prefill",
            Role::Decode => "decode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// Runtime initialized, no weights; available for scale-out.
    Warm,
    Loading,
    Running,
    /// No new admissions; stops once empty.
    Draining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Prefill,
    Decode,
}

/// The step a worker is executing. Steps are not interrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub kind: StepKind,
    /// Request indices in the step's batch.
    pub batch: Vec<usize>,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone)]
pub struct Worker {
    pub id: usize,
    pub role: Role,
    pub status: Status,
    pub kv_capacity: u64,
    /// KV held by prefilled requests.
    pub kv_used: u64,
    /// KV promised to dispatched requests whose prefill has not finished.
    pub kv_pending: u64,
    /// KV promised to migrations in flight toward this worker.
    pub kv_inbound: u64,
    /// Dispatched, awaiting prefill.
    pub waiting: Vec<usize>,
    /// Decoding on this worker.
    pub running: Vec<usize>,
    /// Prefilled on a prefill worker, awaiting or undergoing migration.
    pub held: Vec<usize>,
    /// Migrations in flight toward this worker.
    pub inbound: Vec<usize>,
    pub step: Option<Step>,
    pub last_step_prefill: bool,
    /// Start of the current billing span.
    pub active_since: Option<f64>,
    /// Role to take once drained, for role rebalancing.
    pub pending_role: Option<Role>,
}

impl Worker {
    pub fn new(id: usize, role: Role, status: Status, kv_capacity: u64) -> Self {
        Self {
            id,
            role,
            status,
            kv_capacity,
            kv_used: 0,
            kv_pending: 0,
            kv_inbound: 0,
            waiting: Vec::new(),
            running: Vec::new(),
            held: Vec::new(),
            inbound: Vec::new(),
            step: None,
            last_step_prefill: false,
            active_since: None,
            pending_role: None,
        }
    }

    pub fn is_active(&self) -> bool {
        matches!(
            self.status,
            Status::Loading | Status::Running | Status::Draining
        )
    }

    pub fn accepting(&self) -> bool {
        self.status == Status::Running
    }

    pub fn kv_committed(&self) -> u64 {
        self.kv_used + self.kv_pending + self.kv_inbound
    }

    pub fn kv_free(&self) -> u64 {
        self.kv_capacity.saturating_sub(self.kv_committed())
    }

    pub fn utilization(&self) -> f64 {
        if self.kv_capacity == 0 {
            1.0
        } else {
            self.kv_committed() as f64 / self.kv_capacity as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.step.is_none()
            && self.waiting.is_empty()
            && self.running.is_empty()
            && self.held.is_empty()
            && self.inbound.is_empty()
    }
}
