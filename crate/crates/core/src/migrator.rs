//! Decode-stage scheduling for disaggregated serving: prefilled requests wait
//! in a TPOT-ordered queue and are placed on the earliest-available decode
//! worker whose next decode step would still meet every member's TPOT.

use std::collections::HashMap;

use crate::dispatch::queue::MigrationQueue;
use crate::workload::SloSpec;
use crate::LatencyModel;

/// A prefilled request waiting for a decode worker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefilledRequest {
    pub id: u64,
    pub slo: SloSpec<f64>,
    pub first_token: f64,
    /// Tokens of KV cache that move with the request.
    pub kv_tokens: u64,
    /// Current sequence length.
    pub current_len: u64,
    /// Sequence length expected at completion, used for decode projection.
    pub projected_len: u64,
}

/// Decode worker state as seen by the migrator.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCandidate {
    pub worker: usize,
    /// End of the current decode iteration, or now when idle.
    pub maturity: f64,
    pub kv_free: u64,
    /// Σ projected lengths and count over resident and inbound requests.
    pub projected_len_sum: u64,
    pub batch: usize,
    pub min_tpot: Option<f64>,
}

impl DecodeCandidate {
    fn accepts(&self, r: &PrefilledRequest, model: &LatencyModel) -> bool {
        if self.kv_free < r.current_len.max(r.kv_tokens) {
            return false;
        }
        let min_tpot = self.min_tpot.map_or(r.slo.tpot, |m| m.min(r.slo.tpot));
        model.decode_from_sums(self.projected_len_sum + r.projected_len, self.batch + 1) <= min_tpot
    }

    fn admit(&mut self, r: &PrefilledRequest) {
        self.kv_free -= r.kv_tokens;
        self.projected_len_sum += r.projected_len;
        self.batch += 1;
        self.min_tpot = Some(self.min_tpot.map_or(r.slo.tpot, |m| m.min(r.slo.tpot)));
    }
}

/// Picks the earliest-maturity candidate that can take `r`; ties go to the
/// lower worker id.
pub fn select_decode_worker(
    r: &PrefilledRequest,
    candidates: &[DecodeCandidate],
    model: &LatencyModel,
) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.accepts(r, model))
        .min_by(|(_, a), (_, b)| {
            a.maturity
                .total_cmp(&b.maturity)
                .then(a.worker.cmp(&b.worker))
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, Default)]
pub struct Migrator {
    queue: MigrationQueue,
    pending: HashMap<u64, PrefilledRequest>,
}

impl Migrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_prefill_complete(&mut self, r: PrefilledRequest) {
        if self.queue.push(r.id, r.slo.tpot, r.first_token) {
            self.pending.insert(r.id, r);
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn waiting(&self) -> impl Iterator<Item = &PrefilledRequest> {
        self.queue.iter().map(|id| &self.pending[&id])
    }

    /// Assigns queued requests in key order; requests that fit nowhere stay
    /// queued. Candidate state is updated as assignments are made.
    pub fn assign(
        &mut self,
        candidates: &mut [DecodeCandidate],
        model: &LatencyModel,
    ) -> Vec<(u64, usize)> {
        let mut out = Vec::new();
        let ids: Vec<u64> = self.queue.iter().collect();
        for id in ids {
            let r = self.pending[&id];
            if let Some(i) = select_decode_worker(&r, candidates, model) {
                candidates[i].admit(&r);
                self.queue.remove(id);
                self.pending.remove(&id);
                out.push((id, candidates[i].worker));
            }
        }
        out
    }
}
