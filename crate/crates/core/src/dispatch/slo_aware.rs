//! SLO-aware dispatcher: request queue ordered by TPOT, worker queue ordered
//! by maturity time, token-budget admission and maturity updates, all driven
//! from a shadow copy of worker state that is refreshed by the monitor.

use std::collections::{BTreeMap, HashMap};

use crate::dispatch::budget::{calculate_p, compute_ntoken, maturity_time};
use crate::dispatch::queue::{RequestQueue, WorkerQueue};
use crate::dispatch::{DispatchDecision, DispatcherConfig};
use crate::workload::SloSpec;
use crate::LatencyModel;

/// Which phases the dispatched-to workers execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Workers prefill and decode.
    Collocated,
    /// Workers only prefill; decoding happens after migration.
    Prefill,
}

/// A request waiting in the dispatcher's queue.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedRequest {
    pub id: u64,
    pub task: usize,
    pub arrival: f64,
    pub input_len: u32,
    pub slo: SloSpec<f64>,
    pub priority: Option<u32>,
}

/// A request resident on a worker, as reported by the monitor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resident {
    pub id: u64,
    pub task: usize,
    pub input_len: u32,
    /// Tokens generated so far, including the first.
    pub generated: u32,
    pub slo: SloSpec<f64>,
}

impl Resident {
    pub fn current_len(&self) -> u64 {
        u64::from(self.input_len) + u64::from(self.generated)
    }
}

/// True state of one worker at a monitor sync.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkerSnapshot {
    pub id: usize,
    pub kv_capacity: u64,
    /// Dispatched, prefill not started.
    pub waiting: Vec<Resident>,
    /// Batch of the prefill step in progress and its start time.
    pub prefilling: Vec<Resident>,
    pub prefill_started: Option<f64>,
    /// Prefilled and still holding KV on this worker.
    pub running: Vec<Resident>,
    /// Free to start new work immediately.
    pub idle: bool,
}

/// Per-task running estimate of output length, used to reserve KV and to
/// project decode cost without reading ground truth.
#[derive(Debug, Clone)]
pub struct OutputEstimator {
    alpha: f64,
    estimates: Vec<f64>,
}

impl OutputEstimator {
    pub fn new(alpha: f64, initial: impl IntoIterator<Item = f64>) -> Self {
        Self {
            alpha,
            estimates: initial.into_iter().collect(),
        }
    }

    pub fn estimate(&self, task: usize) -> u32 {
        self.estimates
            .get(task)
            .map_or(1, |e| e.ceil().max(1.0) as u32)
    }

    pub fn observe(&mut self, task: usize, output_len: u32) {
        if let Some(e) = self.estimates.get_mut(task) {
            *e += self.alpha * (f64::from(output_len) - *e);
        }
    }
}

#[derive(Debug, Clone)]
struct Shadow {
    kv_capacity: u64,
    /// Waiting entries carry the predicted prefill completion time of the
    /// batch they were dispatched in; `None` for entries learned from a sync.
    waiting: Vec<(Resident, Option<f64>)>,
    running: Vec<Resident>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Sums {
    tokens: u64,
    tokens_sq: u64,
    current: u64,
    projected: u64,
    count: usize,
    min_tpot: Option<f64>,
}

impl Sums {
    fn add(&mut self, input_len: u32, current: u64, projected: u64, tpot: f64) {
        let l = u64::from(input_len);
        self.tokens += l;
        self.tokens_sq += l * l;
        self.current += current;
        self.projected += projected;
        self.count += 1;
        self.min_tpot = Some(self.min_tpot.map_or(tpot, |m| m.min(tpot)));
    }
}

#[derive(Debug, Clone)]
pub struct SloAwareDispatcher {
    cfg: DispatcherConfig,
    stage: Stage,
    queue: RequestQueue,
    pending: HashMap<u64, QueuedRequest>,
    workers: WorkerQueue,
    shadows: BTreeMap<usize, Shadow>,
    outputs: OutputEstimator,
}

impl SloAwareDispatcher {
    pub fn new(cfg: DispatcherConfig, stage: Stage, outputs: OutputEstimator) -> Self {
        Self {
            cfg,
            stage,
            queue: RequestQueue::new(),
            pending: HashMap::new(),
            workers: WorkerQueue::new(),
            shadows: BTreeMap::new(),
            outputs,
        }
    }

    pub fn config(&self) -> &DispatcherConfig {
        &self.cfg
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Adds a worker to the pool, immediately available.
    pub fn add_worker(&mut self, id: usize, kv_capacity: u64, now: f64) {
        self.shadows.insert(
            id,
            Shadow {
                kv_capacity,
                waiting: Vec::new(),
                running: Vec::new(),
            },
        );
        self.workers.push(id, now);
    }

    /// Stops offering work to a worker (draining, role change).
    pub fn remove_worker(&mut self, id: usize) {
        self.workers.remove(id);
        self.shadows.remove(&id);
    }

    pub fn has_worker(&self, id: usize) -> bool {
        self.workers.contains(id)
    }

    pub fn worker_queue(&self) -> &WorkerQueue {
        &self.workers
    }

    pub fn enqueue(&mut self, request: QueuedRequest) {
        if self
            .queue
            .push(request.id, request.slo.tpot, request.arrival)
        {
            self.pending.insert(request.id, request);
        }
    }

    pub fn queue(&self) -> &RequestQueue {
        &self.queue
    }

    pub fn queued(&self) -> impl Iterator<Item = &QueuedRequest> {
        self.queue.iter().map(|id| &self.pending[&id])
    }

    pub fn observe_completion(&mut self, task: usize, output_len: u32) {
        self.outputs.observe(task, output_len);
    }

    pub fn output_estimator(&self) -> &OutputEstimator {
        &self.outputs
    }

    /// Replaces shadow state with fresh snapshots. Workers found idle have
    /// their maturity pulled in to `now`. The in-progress prefill batch gets
    /// a predicted completion from `model`.
    pub fn sync<'a>(
        &mut self,
        now: f64,
        snapshots: impl IntoIterator<Item = &'a WorkerSnapshot>,
        model: &LatencyModel,
    ) {
        for snap in snapshots {
            let Some(shadow) = self.shadows.get_mut(&snap.id) else {
                continue;
            };
            shadow.kv_capacity = snap.kv_capacity;
            let step_end = snap.prefill_started.map(|start| {
                let (sum, sum_sq) = snap.prefilling.iter().fold((0u64, 0u64), |(s, q), r| {
                    let l = u64::from(r.input_len);
                    (s + l, q + l * l)
                });
                start + model.prefill_from_sums(sum, sum_sq)
            });
            shadow.waiting = snap
                .prefilling
                .iter()
                .map(|r| (*r, Some(step_end.unwrap_or(now))))
                .chain(snap.waiting.iter().map(|r| (*r, None)))
                .collect();
            shadow.running = snap.running.clone();
            if snap.idle {
                if let Some(m) = self.workers.maturity(snap.id) {
                    if m > now {
                        self.workers.push(snap.id, now);
                    }
                }
            }
        }
    }

    /// Earliest maturity among pooled workers.
    pub fn next_maturity(&self) -> Option<f64> {
        self.workers.peek().map(|(_, m)| m)
    }

    /// Runs dispatch rounds for every worker whose maturity has been reached
    /// while requests are queued.
    pub fn run_ready(&mut self, now: f64, model: &LatencyModel) -> Vec<DispatchDecision> {
        let mut out = Vec::new();
        while !self.queue.is_empty() {
            match self.workers.peek() {
                Some((_, m)) if m <= now => {}
                _ => break,
            }
            if let Some(d) = self.dispatch_round(now, model) {
                out.push(d);
            }
        }
        out
    }

    fn projected_len(&self, task: usize, input_len: u32, generated: u32) -> u64 {
        u64::from(input_len) + u64::from(self.outputs.estimate(task).max(generated))
    }

    /// One pass of the dispatch loop: takes the earliest-maturity worker,
    /// admits requests from the queue under its token limit, and reinserts
    /// it with an updated maturity time.
    pub fn dispatch_round(&mut self, now: f64, model: &LatencyModel) -> Option<DispatchDecision> {
        let (worker, _) = self.workers.pop()?;
        let collocated = self.stage == Stage::Collocated;
        let shadow = self
            .shadows
            .get(&worker)
            .cloned()
            .expect("pooled worker has shadow state");

        // Shadow batches as of `now`: dispatched batches whose predicted
        // prefill has finished count as running.
        let mut wait = Sums::default();
        let mut resident = Sums::default();
        let mut run_only = Sums::default();
        let mut reserved: u64 = 0;
        let mut tightest: Option<SloSpec<f64>> = None;
        let mut visit = |r: &Resident, waiting: bool, this: &Self| {
            let cur = r.current_len();
            let proj = this.projected_len(r.task, r.input_len, r.generated);
            resident.add(r.input_len, cur, proj, r.slo.tpot);
            if waiting {
                wait.add(r.input_len, cur, proj, r.slo.tpot);
            } else {
                run_only.add(r.input_len, cur, proj, r.slo.tpot);
            }
            if collocated {
                reserved += u64::from(this.outputs.estimate(r.task).saturating_sub(r.generated));
            }
            tightest = Some(tightest.map_or(r.slo, |t| t.tighten(r.slo)));
        };
        for (r, done) in &shadow.waiting {
            visit(r, done.is_none_or(|d| d > now), self);
        }
        for r in &shadow.running {
            visit(r, false, self);
        }

        if self.queue.is_empty() {
            let maturity = self.idle_maturity(now, model, &run_only);
            self.workers.push(worker, maturity);
            return Some(DispatchDecision {
                worker,
                admitted: Vec::new(),
                token_limit: 0,
                maturity,
            });
        }

        for q in self.pending.values() {
            tightest = Some(tightest.map_or(q.slo, |t| t.tighten(q.slo)));
        }
        let tightest = tightest.expect("queue non-empty");

        let capacity = shadow.kv_capacity;
        let free_token = capacity.saturating_sub(resident.tokens + reserved);
        let utilization = if capacity == 0 {
            1.0
        } else {
            resident.tokens as f64 / capacity as f64
        };
        let decode_now = if collocated && resident.count > 0 {
            model.decode_from_sums(resident.current, resident.count)
        } else {
            0.0
        };
        let ntoken = compute_ntoken(tightest, decode_now, model, self.cfg.max_budget);
        let token_limit = free_token.min(ntoken);

        let theta = self.cfg.theta;
        let mut admitted: Vec<u64> = Vec::new();
        let mut admitted_tokens: u64 = 0;
        let mut projected = resident;
        let mut best_effort: Vec<u64> = Vec::new();

        let try_admit = |q: &QueuedRequest,
                         admitted_tokens: &mut u64,
                         projected: &mut Sums,
                         this: &Self|
         -> bool {
            let l = u64::from(q.input_len);
            if *admitted_tokens + l >= token_limit {
                return false;
            }
            let proj = this.projected_len(q.task, q.input_len, 0);
            if collocated {
                let min_tpot = projected.min_tpot.map_or(q.slo.tpot, |m| m.min(q.slo.tpot));
                if model.decode_from_sums(projected.projected + proj, projected.count + 1)
                    > min_tpot
                {
                    return false;
                }
            }
            *admitted_tokens += l;
            projected.add(q.input_len, l, proj, q.slo.tpot);
            true
        };

        for id in self.queue.iter() {
            let q = &self.pending[&id];
            let single =
                model.prefill_from_sums(u64::from(q.input_len), u64::from(q.input_len).pow(2));
            let p = calculate_p(
                q.arrival,
                q.slo.ttft,
                now,
                single,
                utilization,
                self.cfg.util_weight,
            );
            if p < theta {
                // Slack already below the gate even on an empty worker: it
                // cannot recover, so it only gets leftover capacity.
                if calculate_p(
                    q.arrival,
                    q.slo.ttft,
                    now,
                    single,
                    0.0,
                    self.cfg.util_weight,
                ) < theta
                {
                    best_effort.push(id);
                }
                continue;
            }
            if try_admit(q, &mut admitted_tokens, &mut projected, self) {
                admitted.push(id);
            }
        }
        // Hopeless requests take whatever budget the viable ones left.
        for id in best_effort {
            let q = &self.pending[&id];
            if try_admit(q, &mut admitted_tokens, &mut projected, self) {
                admitted.push(id);
            }
        }

        // Maturity from the batch the worker will hold after this dispatch.
        let mut new_wait = wait;
        let mut all = resident;
        for id in &admitted {
            let q = &self.pending[id];
            let l = u64::from(q.input_len);
            new_wait.add(q.input_len, l, l, q.slo.tpot);
            all.add(q.input_len, l, l, q.slo.tpot);
        }
        let maturity = if new_wait.count == 0 {
            self.idle_maturity(now, model, &run_only)
        } else {
            let prefill = model.prefill_from_sums(new_wait.tokens, new_wait.tokens_sq);
            let m = if collocated {
                let decode = model.decode_from_sums(all.current, all.count);
                maturity_time(now, prefill, decode, all.min_tpot.unwrap_or(f64::INFINITY))
            } else {
                now + prefill
            };
            if admitted.is_empty() && m <= now {
                now + self.cfg.poll_interval_s
            } else {
                m
            }
        };

        if !admitted.is_empty() {
            let predicted_done = now + model.prefill_from_sums(new_wait.tokens, new_wait.tokens_sq);
            let shadow = self.shadows.get_mut(&worker).expect("pooled worker");
            for id in &admitted {
                let q = self.pending.remove(id).expect("admitted from pending");
                self.queue.remove(*id);
                shadow.waiting.push((
                    Resident {
                        id: q.id,
                        task: q.task,
                        input_len: q.input_len,
                        generated: 0,
                        slo: q.slo,
                    },
                    Some(predicted_done),
                ));
            }
        }
        self.workers.push(worker, maturity);
        Some(DispatchDecision {
            worker,
            admitted,
            token_limit,
            maturity,
        })
    }

    fn idle_maturity(&self, now: f64, model: &LatencyModel, running: &Sums) -> f64 {
        if self.stage == Stage::Collocated && running.count > 0 {
            now + model
                .decode_from_sums(running.current, running.count)
                .max(self.cfg.poll_interval_s)
        } else {
            now + self.cfg.poll_interval_s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> LatencyModel {
        LatencyModel {
            a: 0.01,
            b: 0.001,
            c: 0.0,
            a_prime: 0.0,
            b_prime: 0.0,
            c_prime: 0.0,
        }
    }

    fn cfg() -> DispatcherConfig {
        DispatcherConfig {
            max_budget: 1 << 30,
            ..DispatcherConfig::default()
        }
    }

    fn queued(id: u64, input_len: u32, ttft: f64, tpot: f64) -> QueuedRequest {
        QueuedRequest {
            id,
            task: 0,
            arrival: 0.0,
            input_len,
            slo: SloSpec { ttft, tpot },
            priority: None,
        }
    }

    fn dispatcher(stage: Stage) -> SloAwareDispatcher {
        SloAwareDispatcher::new(cfg(), stage, OutputEstimator::new(0.1, [10.0]))
    }

    #[test]
    fn empty_queue_advances_by_poll_interval() {
        let mut d = dispatcher(Stage::Collocated);
        d.add_worker(0, 16384, 0.0);
        let dec = d.dispatch_round(1.0, &model()).unwrap();
        assert!(dec.admitted.is_empty());
        assert_eq!(dec.maturity, 1.0 + d.config().poll_interval_s);
    }

    #[test]
    fn first_fit_scan_under_token_limit() {
        // TTFT=0.7, TPOT=0.5, E_d = 0 on an idle worker: ntoken = (0.35 - 0.005) / 0.0005 = 690.
        // KV capacity shapes the limit to 550 instead: 560 - 10 reserved output tokens.
        let mut d = dispatcher(Stage::Prefill);
        d.add_worker(0, 550, 0.0);
        d.enqueue(queued(1, 300, 20.0, 0.5));
        d.enqueue(queued(2, 300, 20.0, 0.5));
        d.enqueue(queued(3, 100, 20.0, 0.5));
        let dec = d.dispatch_round(0.0, &model()).unwrap();
        assert_eq!(dec.token_limit, 550);
        assert_eq!(dec.admitted, vec![1, 3]);
        assert_eq!(d.queue().iter().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn probability_gate_blocks_admission() {
        let mut d = dispatcher(Stage::Collocated);
        d.add_worker(0, 10000, 0.0);
        let busy = Resident {
            id: 99,
            task: 0,
            input_len: 9000,
            generated: 5,
            slo: SloSpec {
                ttft: 20.0,
                tpot: 0.5,
            },
        };
        let snap = WorkerSnapshot {
            id: 0,
            kv_capacity: 10000,
            running: vec![busy],
            ..Default::default()
        };
        d.sync(0.1, [&snap], &model());
        // utilization 0.9: slack fraction 0.88 scores 0.484, 0.996 scores 0.548
        d.enqueue(queued(1, 10, 1.0, 0.5));
        let mut q3 = queued(3, 10, 5.0, 0.5);
        q3.arrival = 0.1;
        d.enqueue(q3);
        let dec = d.dispatch_round(0.1, &model()).unwrap();
        assert_eq!(dec.admitted, vec![3]);
    }

    #[test]
    fn hopeless_requests_get_leftover_capacity_only() {
        let mut d = dispatcher(Stage::Collocated);
        d.add_worker(0, 16384, 0.0);
        d.enqueue(queued(1, 10, 1.0, 0.5));
        let dec = d.dispatch_round(0.9, &model()).unwrap();
        assert_eq!(dec.admitted, vec![1]);
    }

    #[test]
    fn maturity_formula_after_dispatch() {
        // Prefill of a 190-token request: E_p = 0.01 + 0.19 = 0.2; E_d = 0.05; TPOT 0.25.
        let m = LatencyModel {
            a: 0.01,
            b: 0.001,
            c: 0.0,
            a_prime: 0.05,
            b_prime: 0.0,
            c_prime: 0.0,
        };
        let mut d = dispatcher(Stage::Collocated);
        d.add_worker(0, 16384, 0.0);
        d.enqueue(queued(1, 190, 20.0, 0.25));
        let dec = d.dispatch_round(3.0, &m).unwrap();
        assert_eq!(dec.admitted, vec![1]);
        assert!((dec.maturity - 3.25).abs() < 1e-12, "{}", dec.maturity);
    }

    #[test]
    fn selects_earliest_maturity_worker() {
        let mut d = dispatcher(Stage::Prefill);
        d.add_worker(0, 16384, 0.0);
        d.add_worker(1, 16384, 0.0);
        d.workers.push(0, 0.5);
        d.enqueue(queued(1, 10, 20.0, 0.5));
        let dec = d.dispatch_round(0.0, &model()).unwrap();
        assert_eq!(dec.worker, 1);
    }

    #[test]
    fn sync_pulls_idle_worker_forward() {
        let mut d = dispatcher(Stage::Collocated);
        d.add_worker(0, 16384, 0.0);
        d.workers.push(0, 5.0);
        let snap = WorkerSnapshot {
            id: 0,
            kv_capacity: 16384,
            idle: true,
            ..Default::default()
        };
        d.sync(1.0, [&snap], &model());
        assert_eq!(d.next_maturity(), Some(1.0));
    }

    #[test]
    fn output_estimator_ema() {
        let mut e = OutputEstimator::new(0.1, [100.0]);
        e.observe(0, 200);
        assert_eq!(e.estimate(0), 110);
    }
}
