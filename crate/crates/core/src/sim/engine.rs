use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::worker::{Role, Status, Step, StepKind, Worker};
use super::{LogEntry, Mode, Policy, SimConfig, SimOutput, SimStats};
use crate::dispatch::{
    OutputEstimator, QueuedRequest, Resident, RoundRobin, SloAwareDispatcher, Stage, WorkerSnapshot,
};
use crate::error::{Error, Result};
use crate::metrics::{RequestResult, Span};
use crate::migrator::{DecodeCandidate, Migrator, PrefilledRequest};
use crate::priority::{Observation, PriorityBounds, PriorityMapper};
use crate::scaler::{load_metric, HotRole, ProvisioningMode, RoleBalancer, ScaleAction, Scaler};
use crate::workload::{Request, SloSpec};

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Arrival(usize),
    DispatchWake,
    DispatchDeliver { worker: usize, batch: Vec<usize> },
    PrefillDone(usize),
    DecodeStepDone(usize),
    MigrationDone { req: usize, src: usize, dst: usize },
    MonitorTick,
    ScaleTick,
    WorkerReady(usize),
}

#[derive(Debug, Clone)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
struct ReqState {
    req: Request,
    generated: u32,
    /// Targets the schedulers see.
    slo: SloSpec<f64>,
    /// Targets attainment is judged against.
    target: SloSpec<f64>,
    done: bool,
}

impl ReqState {
    fn current_len(&self) -> u64 {
        u64::from(self.req.input_len) + u64::from(self.generated)
    }
}

enum Front {
    SloAware(Box<SloAwareDispatcher>),
    RoundRobin {
        rr: RoundRobin,
        pending: VecDeque<usize>,
    },
}

enum Back {
    None,
    Migrator(Migrator),
    RoundRobin {
        rr: RoundRobin,
        pending: VecDeque<usize>,
    },
}

pub(super) struct Engine<'a> {
    cfg: &'a SimConfig,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    reqs: Vec<ReqState>,
    workers: Vec<Worker>,
    front: Front,
    back: Back,
    mapper: Option<PriorityMapper>,
    scaler: Option<(Scaler, RoleBalancer)>,
    rng: ChaCha8Rng,
    next_wake: Option<f64>,
    spans: Vec<Span>,
    log: Vec<LogEntry>,
    stats: SimStats,
    done: usize,
    arrived: usize,
    last_progress: f64,
    arrivals_in_tick: u64,
    completions_in_tick: u64,
}

impl<'a> Engine<'a> {
    pub(super) fn new(cfg: &'a SimConfig, trace: &[Request]) -> Result<Self> {
        let priority_mode = cfg.priority.is_some();
        let mut seen = HashSet::new();
        let mut reqs = Vec::with_capacity(trace.len());
        let mut last_arrival = f64::NEG_INFINITY;
        for r in trace {
            if !seen.insert(r.id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate request id {}",
                    r.id
                )));
            }
            if r.task >= cfg.tasks.len() {
                return Err(Error::InvalidArgument(format!(
                    "request {} references task {}",
                    r.id, r.task
                )));
            }
            if !(r.arrival_time >= last_arrival) || !r.arrival_time.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "trace not sorted by arrival at request {}",
                    r.id
                )));
            }
            if r.input_len == 0 || r.output_len == 0 {
                return Err(Error::InvalidArgument(format!(
                    "request {} has zero-length input or output",
                    r.id
                )));
            }
            last_arrival = r.arrival_time;
            let nominal = cfg.tasks[r.task].slo;
            let slo = r.slo.unwrap_or(nominal);
            let target = if priority_mode { nominal } else { slo };
            let mut req = r.clone();
            req.timestamps = Default::default();
            if priority_mode && req.priority.is_none() {
                req.priority = Some(cfg.tasks[r.task].priority);
            }
            reqs.push(ReqState {
                req,
                generated: 0,
                slo,
                target,
                done: false,
            });
        }

        let max_slots = cfg
            .scaler
            .as_ref()
            .map_or(0, |s| s.max_workers)
            .max(cfg.initial_workers());
        let mut workers = Vec::with_capacity(max_slots);
        let initial_roles: Vec<Role> = match cfg.mode {
            Mode::Collocated => vec![Role::Collocated; cfg.workers],
            Mode::PdDisaggregated => std::iter::repeat_n(Role::Prefill, cfg.prefill_workers)
                .chain(std::iter::repeat_n(Role::Decode, cfg.decode_workers))
                .collect(),
        };
        for id in 0..max_slots {
            match initial_roles.get(id) {
                Some(&role) => {
                    workers.push(Worker::new(id, role, Status::Running, cfg.kv_capacity))
                }
                None => {
                    let role = if cfg.mode == Mode::Collocated {
                        Role::Collocated
                    } else {
                        Role::Decode
                    };
                    workers.push(Worker::new(id, role, Status::Warm, cfg.kv_capacity));
                }
            }
        }

        let front = match cfg.policy {
            Policy::SloAware => {
                let stage = if cfg.mode == Mode::Collocated {
                    Stage::Collocated
                } else {
                    Stage::Prefill
                };
                let est = OutputEstimator::new(
                    cfg.dispatcher.output_ema_alpha,
                    cfg.tasks.iter().map(|t| t.output_len_mean),
                );
                Front::SloAware(Box::new(SloAwareDispatcher::new(
                    cfg.dispatcher.clone(),
                    stage,
                    est,
                )))
            }
            Policy::RoundRobin => Front::RoundRobin {
                rr: RoundRobin::new(),
                pending: VecDeque::new(),
            },
        };
        let back = match (cfg.mode, cfg.policy) {
            (Mode::Collocated, _) => Back::None,
            (Mode::PdDisaggregated, Policy::SloAware) => Back::Migrator(Migrator::new()),
            (Mode::PdDisaggregated, Policy::RoundRobin) => Back::RoundRobin {
                rr: RoundRobin::new(),
                pending: VecDeque::new(),
            },
        };
        let mapper = match (&cfg.priority, cfg.policy) {
            (Some(p), Policy::SloAware) => {
                let bounds = match &p.bounds {
                    Some(b) => b.clone(),
                    None => PriorityBounds::from_tasks(&cfg.tasks, p.bounds_spread)?,
                };
                Some(PriorityMapper::new(p.window_size, bounds)?)
            }
            _ => None,
        };
        let scaler = cfg.scaler.as_ref().map(|s| {
            (
                Scaler::new(s.clone()),
                RoleBalancer::new(s.role_flip_ratio, s.role_flip_patience, s.eps_in),
            )
        });

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x5ca1e);

        Ok(Self {
            cfg,
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            reqs,
            workers,
            front,
            back,
            mapper,
            scaler,
            rng,
            next_wake: None,
            spans: Vec::new(),
            log: Vec::new(),
            stats: SimStats::default(),
            done: 0,
            arrived: 0,
            last_progress: 0.0,
            arrivals_in_tick: 0,
            completions_in_tick: 0,
        })
    }

    fn push(&mut self, time: f64, kind: Kind) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.heap.push(Event {
            time: time.max(self.now),
            seq: self.seq,
            kind,
        });
    }

    fn record(&mut self, event: &str, req: Option<usize>, worker: Option<usize>, detail: String) {
        if self.cfg.record_log {
            let request_id = req.map(|i| self.reqs[i].req.id);
            self.log.push(LogEntry {
                time_s: self.now,
                event: event.to_string(),
                request_id,
                worker_id: worker,
                detail,
            });
        }
    }

    fn start_billing(&mut self, w: usize) {
        self.workers[w].active_since = Some(self.now);
        let role = self.workers[w].role.as_str();
        self.record("worker_start", None, Some(w), role.to_string());
    }

    fn stop_billing(&mut self, w: usize, detail: &str) {
        if let Some(start) = self.workers[w].active_since.take() {
            self.spans.push(Span {
                worker: w,
                start,
                end: self.now,
            });
            self.record("worker_stop", None, Some(w), detail.to_string());
        }
    }

    pub(super) fn run(mut self) -> Result<SimOutput> {
        let n = self.reqs.len();
        for w in 0..self.workers.len() {
            if self.workers[w].status == Status::Running {
                self.start_billing(w);
                self.pool_add(w);
            }
        }
        for i in 0..n {
            let t = self.reqs[i].req.arrival_time;
            self.push(t, Kind::Arrival(i));
        }
        if n > 0 {
            self.push(0.0, Kind::MonitorTick);
            if let Some(s) = &self.cfg.scaler {
                let tau = s.tau_s;
                self.push(tau, Kind::ScaleTick);
            }
        }

        while self.done < n {
            let Some(ev) = self.heap.pop() else {
                return Err(self.stall());
            };
            if let Some(d) = self.cfg.deadline_s {
                if ev.time > d {
                    self.now = d;
                    break;
                }
            }
            debug_assert!(ev.time >= self.now);
            self.now = ev.time;
            self.stats.events += 1;
            if self.arrived > self.done && self.now - self.last_progress > self.cfg.stall_timeout_s
            {
                return Err(self.stall());
            }
            self.handle(ev)?;
        }

        for w in 0..self.workers.len() {
            self.stop_billing(w, "end");
        }
        Ok(self.finish())
    }

    fn stall(&self) -> Error {
        let stuck = self
            .reqs
            .iter()
            .filter(|r| !r.done && r.req.arrival_time <= self.now)
            .map(|r| r.req.id)
            .collect();
        Error::SimulationStall {
            time: self.now,
            stuck,
        }
    }

    fn finish(self) -> SimOutput {
        let tasks = &self.cfg.tasks;
        let results = self
            .reqs
            .iter()
            .map(|r| RequestResult {
                id: r.req.id,
                task: tasks[r.req.task].name.clone(),
                priority: r.req.priority,
                arrival: r.req.arrival_time,
                dispatch: r.req.timestamps.dispatch,
                first_token: r.req.timestamps.first_token,
                completion: r.req.timestamps.completion,
                output_len: r.req.output_len,
                target_ttft: r.target.ttft,
                target_tpot: r.target.tpot,
            })
            .collect();
        let requests = self
            .reqs
            .into_iter()
            .map(|r| {
                let mut req = r.req;
                req.slo = Some(r.slo);
                req
            })
            .collect();
        SimOutput {
            requests,
            results,
            spans: self.spans,
            log: self.log,
            stats: self.stats,
            end_time: self.now,
        }
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        match ev.kind {
            Kind::Arrival(i) => self.on_arrival(i),
            Kind::DispatchWake => {
                if self.next_wake == Some(ev.time) {
                    self.next_wake = None;
                    self.dispatch_slo_aware();
                }
            }
            Kind::DispatchDeliver { worker, batch } => self.deliver(worker, &batch),
            Kind::PrefillDone(w) => self.on_prefill_done(w),
            Kind::DecodeStepDone(w) => self.on_decode_done(w),
            Kind::MigrationDone { req, src, dst } => self.on_migration_done(req, src, dst),
            Kind::MonitorTick => self.on_monitor_tick(),
            Kind::ScaleTick => self.on_scale_tick(),
            Kind::WorkerReady(w) => self.on_worker_ready(w),
        }
        Ok(())
    }

    // ----- arrivals and the front-end dispatch -----

    fn on_arrival(&mut self, i: usize) {
        self.last_progress = self.now;
        self.arrived += 1;
        self.arrivals_in_tick += 1;
        let prio = self.reqs[i].req.priority;
        if let (Some(p), Some(mapper)) = (prio, self.mapper.as_mut()) {
            let higher_pending = match &self.front {
                Front::SloAware(d) => d.queued().any(|q| q.priority.is_some_and(|qp| qp < p)),
                Front::RoundRobin { .. } => false,
            };
            self.reqs[i].slo = mapper.assign_slo(p as usize, higher_pending);
        }
        let slo = self.reqs[i].slo;
        self.record(
            "arrival",
            Some(i),
            None,
            format!("ttft={} tpot={}", slo.ttft, slo.tpot),
        );
        match &mut self.front {
            Front::SloAware(d) => {
                let r = &self.reqs[i].req;
                d.enqueue(QueuedRequest {
                    id: i as u64,
                    task: r.task,
                    arrival: r.arrival_time,
                    input_len: r.input_len,
                    slo,
                    priority: r.priority,
                });
                self.schedule_wake(self.now);
            }
            Front::RoundRobin { pending, .. } => {
                pending.push_back(i);
                self.dispatch_rr();
            }
        }
    }

    fn schedule_wake(&mut self, t: f64) {
        let t = t.max(self.now);
        if self.next_wake.is_none_or(|w| t < w) {
            self.next_wake = Some(t);
            self.push(t, Kind::DispatchWake);
        }
    }

    fn dispatch_slo_aware(&mut self) {
        let Front::SloAware(d) = &mut self.front else {
            return;
        };
        let decisions = d.run_ready(self.now, &self.cfg.scheduler_model);
        let next = if d.queue().is_empty() {
            None
        } else {
            d.next_maturity()
        };
        self.stats.dispatch_rounds += decisions.len() as u64;
        for dec in decisions {
            if !dec.admitted.is_empty() {
                let batch: Vec<usize> = dec.admitted.iter().map(|&id| id as usize).collect();
                self.send(dec.worker, batch);
            }
        }
        if let Some(m) = next {
            self.schedule_wake(m);
        }
    }

    fn dispatch_rr(&mut self) {
        let Front::RoundRobin { rr, pending } = &mut self.front else {
            return;
        };
        if pending.is_empty() {
            return;
        }
        let mut free: Vec<(usize, u64)> = self
            .workers
            .iter()
            .filter(|w| w.accepting() && w.role != Role::Decode)
            .map(|w| (w.id, w.kv_free()))
            .collect();
        let mut queue: VecDeque<(u64, u64)> = pending
            .iter()
            .map(|&i| (i as u64, u64::from(self.reqs[i].req.input_len)))
            .collect();
        let assigned = rr.drain(&mut queue, &mut free);
        pending.drain(..assigned.len());
        for (i, w) in assigned {
            self.send(w, vec![i as usize]);
        }
    }

    fn send(&mut self, worker: usize, batch: Vec<usize>) {
        for &i in &batch {
            self.reqs[i].req.timestamps.dispatch = Some(self.now);
            self.workers[worker].kv_pending += u64::from(self.reqs[i].req.input_len);
        }
        let w = &self.workers[worker];
        assert!(
            w.kv_committed() <= w.kv_capacity,
            "admission overcommitted KV on worker {worker}"
        );
        if self.cfg.decision_latency_s > 0.0 {
            let t = self.now + self.cfg.decision_latency_s;
            self.push(t, Kind::DispatchDeliver { worker, batch });
        } else {
            self.deliver(worker, &batch);
        }
    }

    fn deliver(&mut self, worker: usize, batch: &[usize]) {
        for &i in batch {
            self.workers[worker].waiting.push(i);
            self.record("dispatch", Some(i), Some(worker), String::new());
        }
        self.try_start(worker);
    }

    // ----- worker execution -----

    fn try_start(&mut self, w: usize) {
        let worker = &self.workers[w];
        if worker.step.is_some() || !matches!(worker.status, Status::Running | Status::Draining) {
            return;
        }
        let has_wait = !worker.waiting.is_empty();
        let has_run = !worker.running.is_empty();
        match worker.role {
            Role::Collocated => {
                if has_wait && (!worker.last_step_prefill || !has_run) {
                    self.start_prefill(w);
                } else if has_run {
                    self.start_decode(w);
                }
            }
            Role::Prefill if has_wait => self.start_prefill(w),
            Role::Decode if has_run => self.start_decode(w),
            _ => {}
        }
        self.check_drained(w);
    }

    fn start_prefill(&mut self, w: usize) {
        let batch = std::mem::take(&mut self.workers[w].waiting);
        let (sum, sum_sq) = batch.iter().fold((0u64, 0u64), |(s, q), &i| {
            let l = u64::from(self.reqs[i].req.input_len);
            (s + l, q + l * l)
        });
        let dur = self.cfg.oracle.prefill_from_sums(sum, sum_sq);
        for &i in &batch {
            self.reqs[i].req.timestamps.prefill_start = Some(self.now);
        }
        let end = self.now + dur;
        self.record(
            "prefill_start",
            None,
            Some(w),
            format!("batch={}", batch.len()),
        );
        let worker = &mut self.workers[w];
        worker.step = Some(Step {
            kind: StepKind::Prefill,
            batch,
            start: self.now,
            end,
        });
        worker.last_step_prefill = true;
        self.stats.prefill_steps += 1;
        self.push(end, Kind::PrefillDone(w));
    }

    fn start_decode(&mut self, w: usize) {
        let batch = self.workers[w].running.clone();
        let sum: u64 = batch.iter().map(|&i| self.reqs[i].current_len()).sum();
        let dur = self.cfg.oracle.decode_from_sums(sum, batch.len());
        let min_tpot = batch
            .iter()
            .map(|&i| self.reqs[i].slo.tpot)
            .fold(f64::INFINITY, f64::min);
        if dur > min_tpot {
            self.stats.decode_slo_violations += 1;
        }
        let end = self.now + dur;
        let worker = &mut self.workers[w];
        worker.step = Some(Step {
            kind: StepKind::Decode,
            batch,
            start: self.now,
            end,
        });
        worker.last_step_prefill = false;
        self.stats.decode_steps += 1;
        self.push(end, Kind::DecodeStepDone(w));
    }

    fn on_prefill_done(&mut self, w: usize) {
        let step = self.workers[w].step.take().expect("prefill in progress");
        debug_assert_eq!(step.kind, StepKind::Prefill);
        self.last_progress = self.now;
        let role = self.workers[w].role;
        for i in step.batch {
            let input = u64::from(self.reqs[i].req.input_len);
            let worker = &mut self.workers[w];
            worker.kv_pending -= input;
            worker.kv_used += input;
            let r = &mut self.reqs[i];
            r.req.timestamps.first_token = Some(self.now);
            r.generated = 1;
            self.record("first_token", Some(i), Some(w), String::new());
            if self.reqs[i].req.output_len <= 1 {
                self.complete(i, w);
                continue;
            }
            match role {
                Role::Collocated | Role::Decode => self.workers[w].running.push(i),
                Role::Prefill => {
                    self.workers[w].held.push(i);
                    self.enqueue_decode(i);
                }
            }
        }
        self.try_start(w);
        self.after_release();
    }

    fn on_decode_done(&mut self, w: usize) {
        let step = self.workers[w].step.take().expect("decode in progress");
        debug_assert_eq!(step.kind, StepKind::Decode);
        let mut finished = false;
        for i in step.batch {
            let r = &mut self.reqs[i];
            r.generated += 1;
            if r.generated >= r.req.output_len {
                self.complete(i, w);
                finished = true;
            }
        }
        self.try_start(w);
        if finished {
            self.after_release();
        } else {
            self.try_migrate();
        }
    }

    fn complete(&mut self, i: usize, w: usize) {
        self.last_progress = self.now;
        self.completions_in_tick += 1;
        let input = u64::from(self.reqs[i].req.input_len);
        let worker = &mut self.workers[w];
        worker.kv_used -= input;
        worker.running.retain(|&x| x != i);
        let r = &mut self.reqs[i];
        r.req.timestamps.completion = Some(self.now);
        r.done = true;
        self.done += 1;
        self.record("completion", Some(i), Some(w), String::new());

        let r = &self.reqs[i];
        if let Front::SloAware(d) = &mut self.front {
            d.observe_completion(r.req.task, r.req.output_len);
        }
        if let (Some(m), Some(p)) = (self.mapper.as_mut(), r.req.priority) {
            let ts = &r.req.timestamps;
            m.record_completion(Observation {
                priority: p as usize,
                ttft: r.req.ttft().unwrap_or(0.0),
                tpot: r.req.tpot().unwrap_or(0.0),
                queue_time: ts.dispatch.map_or(0.0, |d| d - r.req.arrival_time),
                completed_at: self.now,
            });
        }
    }

    /// Hooks run whenever KV may have been released.
    fn after_release(&mut self) {
        self.dispatch_rr();
        self.try_migrate();
    }

    // ----- disaggregated decode stage -----

    fn enqueue_decode(&mut self, i: usize) {
        match &mut self.back {
            Back::Migrator(m) => {
                let r = &self.reqs[i];
                let est = match &self.front {
                    Front::SloAware(d) => d.output_estimator().estimate(r.req.task),
                    Front::RoundRobin { .. } => r.req.output_len,
                };
                m.on_prefill_complete(PrefilledRequest {
                    id: i as u64,
                    slo: r.slo,
                    first_token: r.req.timestamps.first_token.expect("prefilled"),
                    kv_tokens: u64::from(r.req.input_len),
                    current_len: r.current_len(),
                    projected_len: u64::from(r.req.input_len) + u64::from(est.max(r.generated)),
                });
            }
            Back::RoundRobin { pending, .. } => pending.push_back(i),
            Back::None => unreachable!("decode queue in collocated mode"),
        }
    }

    fn decode_candidates(&self) -> Vec<DecodeCandidate> {
        let est = |task: usize| match &self.front {
            Front::SloAware(d) => d.output_estimator().estimate(task),
            Front::RoundRobin { .. } => 1,
        };
        self.workers
            .iter()
            .filter(|w| w.role == Role::Decode && w.accepting())
            .map(|w| {
                let members = w.running.iter().chain(&w.inbound);
                let mut sum = 0;
                let mut batch = 0;
                let mut min_tpot: Option<f64> = None;
                for &i in members {
                    let r = &self.reqs[i];
                    sum += u64::from(r.req.input_len) + u64::from(est(r.req.task).max(r.generated));
                    batch += 1;
                    min_tpot = Some(min_tpot.map_or(r.slo.tpot, |m| m.min(r.slo.tpot)));
                }
                let maturity = match &w.step {
                    Some(s) if s.kind == StepKind::Decode => s.end,
                    _ => self.now,
                };
                DecodeCandidate {
                    worker: w.id,
                    maturity,
                    kv_free: w.kv_free(),
                    projected_len_sum: sum,
                    batch,
                    min_tpot,
                }
            })
            .collect()
    }

    fn try_migrate(&mut self) {
        let assignments: Vec<(usize, usize)> = match &self.back {
            Back::None => return,
            Back::Migrator(m) if m.is_empty() => return,
            Back::RoundRobin { pending, .. } if pending.is_empty() => return,
            Back::Migrator(_) => {
                let mut cands = self.decode_candidates();
                let Back::Migrator(m) = &mut self.back else {
                    unreachable!()
                };
                m.assign(&mut cands, &self.cfg.scheduler_model)
                    .into_iter()
                    .map(|(id, w)| (id as usize, w))
                    .collect()
            }
            Back::RoundRobin { .. } => {
                let mut free: Vec<(usize, u64)> = self
                    .workers
                    .iter()
                    .filter(|w| w.role == Role::Decode && w.accepting())
                    .map(|w| (w.id, w.kv_free()))
                    .collect();
                let Back::RoundRobin { rr, pending } = &mut self.back else {
                    unreachable!()
                };
                let mut queue: VecDeque<(u64, u64)> = pending
                    .iter()
                    .map(|&i| (i as u64, self.reqs[i].current_len()))
                    .collect();
                let out = rr.drain(&mut queue, &mut free);
                pending.drain(..out.len());
                out.into_iter().map(|(i, w)| (i as usize, w)).collect()
            }
        };
        for (i, dst) in assignments {
            self.start_migration(i, dst);
        }
    }

    fn start_migration(&mut self, i: usize, dst: usize) {
        let src = self
            .workers
            .iter()
            .position(|w| w.held.contains(&i))
            .expect("migrating request is held by a prefill worker");
        if self.reqs[i].req.timestamps.first_token.is_none() {
            self.stats.one_shot_violations += 1;
        }
        let input = u64::from(self.reqs[i].req.input_len);
        let worker = &mut self.workers[dst];
        worker.kv_inbound += input;
        worker.inbound.push(i);
        self.reqs[i].req.timestamps.migration_start = Some(self.now);
        self.stats.migrations += 1;
        self.record("decode_assign", Some(i), Some(dst), format!("from={src}"));
        let t = self.now + self.cfg.link.delay(self.reqs[i].current_len());
        self.push(t, Kind::MigrationDone { req: i, src, dst });
    }

    fn on_migration_done(&mut self, i: usize, src: usize, dst: usize) {
        self.last_progress = self.now;
        let input = u64::from(self.reqs[i].req.input_len);
        let s = &mut self.workers[src];
        s.held.retain(|&x| x != i);
        s.kv_used -= input;
        let d = &mut self.workers[dst];
        d.inbound.retain(|&x| x != i);
        d.kv_inbound -= input;
        d.kv_used += input;
        d.running.push(i);
        self.reqs[i].req.timestamps.migration_end = Some(self.now);
        self.record("migration_done", Some(i), Some(dst), format!("from={src}"));
        self.try_start(dst);
        self.check_drained(src);
        self.after_release();
    }

    // ----- monitor, pools, scaling -----

    fn snapshot(&self, w: &Worker) -> WorkerSnapshot {
        let resident = |i: usize| {
            let r = &self.reqs[i];
            Resident {
                id: i as u64,
                task: r.req.task,
                input_len: r.req.input_len,
                generated: r.generated,
                slo: r.slo,
            }
        };
        let waiting = w.waiting.iter().map(|&i| resident(i)).collect();
        let (prefilling, prefill_started) = match &w.step {
            Some(s) if s.kind == StepKind::Prefill => (
                s.batch.iter().map(|&i| resident(i)).collect(),
                Some(s.start),
            ),
            _ => (Vec::new(), None),
        };
        let running = w
            .running
            .iter()
            .chain(&w.held)
            .map(|&i| resident(i))
            .collect();
        // A prefill-only worker is free once it has no prefill work; a
        // collocated one only when fully empty, since its maturity also
        // paces decode.
        let idle = match w.role {
            Role::Prefill => w.step.is_none() && w.waiting.is_empty(),
            _ => w.is_empty(),
        };
        WorkerSnapshot {
            id: w.id,
            kv_capacity: w.kv_capacity,
            waiting,
            prefilling,
            prefill_started,
            running,
            idle,
        }
    }

    fn on_monitor_tick(&mut self) {
        if let Front::SloAware(_) = &self.front {
            let snaps: Vec<WorkerSnapshot> = self
                .workers
                .iter()
                .filter(|w| w.accepting() && w.role != Role::Decode)
                .map(|w| self.snapshot(w))
                .collect();
            let Front::SloAware(d) = &mut self.front else {
                unreachable!()
            };
            d.sync(self.now, &snaps, &self.cfg.scheduler_model);
            if !d.queue().is_empty() {
                if let Some(m) = d.next_maturity() {
                    self.schedule_wake(m);
                }
            }
        }
        self.try_migrate();
        let t = self.now + self.cfg.dispatcher.sync_interval_s;
        self.push(t, Kind::MonitorTick);
    }

    fn pool_add(&mut self, w: usize) {
        let role = self.workers[w].role;
        if role == Role::Decode {
            self.try_migrate();
            return;
        }
        match &mut self.front {
            Front::SloAware(d) => {
                d.add_worker(w, self.workers[w].kv_capacity, self.now);
                if !d.queue().is_empty() {
                    self.schedule_wake(self.now);
                }
            }
            Front::RoundRobin { .. } => self.dispatch_rr(),
        }
    }

    fn pool_remove(&mut self, w: usize) {
        if let Front::SloAware(d) = &mut self.front {
            d.remove_worker(w);
        }
    }

    fn check_drained(&mut self, w: usize) {
        if self.workers[w].status != Status::Draining || !self.workers[w].is_empty() {
            return;
        }
        debug_assert_eq!(self.workers[w].kv_committed(), 0);
        match self.workers[w].pending_role.take() {
            Some(role) => {
                let from = self.workers[w].role;
                self.workers[w].role = role;
                self.workers[w].status = Status::Running;
                self.stats.role_changes += 1;
                self.record(
                    "role_change",
                    None,
                    Some(w),
                    format!("{}->{}", from.as_str(), role.as_str()),
                );
                self.pool_add(w);
            }
            None => {
                self.workers[w].status = Status::Warm;
                self.stop_billing(w, "scale_in");
            }
        }
    }

    fn waiting_ratios(&self) -> (f64, f64) {
        let now = self.now;
        let front = match &self.front {
            Front::SloAware(d) => d
                .queued()
                .map(|q| (now - q.arrival) / q.slo.ttft)
                .fold(0.0, f64::max),
            Front::RoundRobin { pending, .. } => pending
                .iter()
                .map(|&i| (now - self.reqs[i].req.arrival_time) / self.reqs[i].slo.ttft)
                .fold(0.0, f64::max),
        };
        let back = match &self.back {
            Back::None => 0.0,
            Back::Migrator(m) => m
                .waiting()
                .map(|r| (now - r.first_token) / r.slo.ttft)
                .fold(0.0, f64::max),
            Back::RoundRobin { pending, .. } => pending
                .iter()
                .map(|&i| {
                    let r = &self.reqs[i];
                    (now - r.req.timestamps.first_token.unwrap_or(now)) / r.slo.ttft
                })
                .fold(0.0, f64::max),
        };
        (front, back)
    }

    fn role_load(&self, role: Role, wait: f64) -> f64 {
        let utils: Vec<f64> = self
            .workers
            .iter()
            .filter(|w| w.accepting() && w.role == role)
            .map(Worker::utilization)
            .collect();
        load_metric(&utils, [wait], 0.0, 1.0)
    }

    fn on_scale_tick(&mut self) {
        let Some(cfg) = self.cfg.scaler.clone() else {
            return;
        };
        let tau = cfg.tau_s;
        let (front_wait, back_wait) = self.waiting_ratios();
        let utils: Vec<f64> = self
            .workers
            .iter()
            .filter(|w| w.accepting())
            .map(Worker::utilization)
            .collect();
        let r_in = self.arrivals_in_tick as f64 / tau;
        let r_proc = self.completions_in_tick as f64 / tau;
        self.arrivals_in_tick = 0;
        self.completions_in_tick = 0;
        let metric = load_metric(&utils, [front_wait, back_wait], r_in, r_proc);

        let active = self.workers.iter().filter(|w| w.is_active()).count();
        let accepting = self.workers.iter().filter(|w| w.accepting()).count();
        let action = self
            .scaler
            .as_mut()
            .expect("scaler configured")
            .0
            .tick(metric, active, accepting);
        let pd = self.cfg.mode == Mode::PdDisaggregated;
        let (load_p, load_d) = if pd {
            (
                self.role_load(Role::Prefill, front_wait),
                self.role_load(Role::Decode, back_wait),
            )
        } else {
            (0.0, 0.0)
        };

        match action {
            Some(ScaleAction::ScaleOut) => self.scale_out(&cfg, metric),
            Some(ScaleAction::ScaleIn) => self.scale_in(metric),
            None if pd => {
                let (_, balancer) = self.scaler.as_mut().expect("scaler configured");
                if let Some(hot) = balancer.tick(load_p, load_d) {
                    self.flip_role(hot);
                }
            }
            None => {}
        }
        if self.done < self.reqs.len() {
            self.push(self.now + tau, Kind::ScaleTick);
        }
    }

    fn scale_out(&mut self, cfg: &crate::scaler::ScalerConfig, metric: f64) {
        let Some(w) = self.workers.iter().position(|w| w.status == Status::Warm) else {
            self.record("scale_out_dropped", None, None, format!("load={metric}"));
            return;
        };
        let delays = cfg.provisioning_delays.unwrap_or(self.cfg.provisioning);
        let mut mode = cfg.provisioning_mode;
        if mode == ProvisioningMode::Fast
            && cfg.fast_failure_prob > 0.0
            && self.rng.random::<f64>() < cfg.fast_failure_prob
        {
            mode = ProvisioningMode::Disk;
        }
        let delay = delays.delay(mode);
        self.workers[w].status = Status::Loading;
        self.stats.scale_outs += 1;
        self.start_billing(w);
        self.record(
            "scale_out",
            None,
            Some(w),
            format!("mode={mode:?} delay={delay} load={metric}"),
        );
        self.push(self.now + delay, Kind::WorkerReady(w));
    }

    fn on_worker_ready(&mut self, w: usize) {
        if self.cfg.mode == Mode::PdDisaggregated {
            let (front_wait, back_wait) = self.waiting_ratios();
            let lp = self.role_load(Role::Prefill, front_wait);
            let ld = self.role_load(Role::Decode, back_wait);
            self.workers[w].role = if lp > ld { Role::Prefill } else { Role::Decode };
        }
        self.workers[w].status = Status::Running;
        let role = self.workers[w].role.as_str();
        self.record("worker_ready", None, Some(w), role.to_string());
        self.pool_add(w);
    }

    fn least_loaded(&self, role: Option<Role>) -> Option<usize> {
        self.workers
            .iter()
            .filter(|w| w.accepting() && role.is_none_or(|r| w.role == r))
            .min_by(|a, b| {
                a.kv_committed()
                    .cmp(&b.kv_committed())
                    .then(b.id.cmp(&a.id))
            })
            .map(|w| w.id)
    }

    fn accepting_in(&self, role: Role) -> usize {
        self.workers
            .iter()
            .filter(|w| w.accepting() && w.role == role)
            .count()
    }

    fn scale_in(&mut self, metric: f64) {
        let role = match self.cfg.mode {
            Mode::Collocated => None,
            Mode::PdDisaggregated => {
                let p = self.accepting_in(Role::Prefill);
                let d = self.accepting_in(Role::Decode);
                match (p > 1, d > 1) {
                    (false, false) => return,
                    (true, false) => Some(Role::Prefill),
                    (false, true) => Some(Role::Decode),
                    (true, true) => Some(if d >= p { Role::Decode } else { Role::Prefill }),
                }
            }
        };
        let Some(w) = self.least_loaded(role) else {
            return;
        };
        self.workers[w].status = Status::Draining;
        self.stats.scale_ins += 1;
        self.pool_remove(w);
        self.record("scale_in", None, Some(w), format!("load={metric}"));
        self.check_drained(w);
    }

    fn flip_role(&mut self, hot: HotRole) {
        let (to, from) = match hot {
            HotRole::Prefill => (Role::Prefill, Role::Decode),
            HotRole::Decode => (Role::Decode, Role::Prefill),
        };
        if self.accepting_in(from) < 2 {
            return;
        }
        let Some(w) = self.least_loaded(Some(from)) else {
            return;
        };
        self.workers[w].status = Status::Draining;
        self.workers[w].pending_role = Some(to);
        self.pool_remove(w);
        self.record(
            "role_drain",
            None,
            Some(w),
            format!("{}->{}", from.as_str(), to.as_str()),
        );
        self.check_drained(w);
    }
}
