//! Tasks, SLOs, requests, and synthetic request streams.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Latency targets of a request: time to first token and time per output token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec<T> {
    pub ttft: T,
    pub tpot: T,
}

impl<T: Scalar> SloSpec<T> {
    pub fn new(ttft: T, tpot: T) -> Result<Self> {
        if !(ttft > T::zero()) || !(tpot > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "SLO targets must be > 0 (ttft={ttft}, tpot={tpot})"
            )));
        }
        Ok(Self { ttft, tpot })
    }

    /// Component-wise minimum.
    pub fn tighten(self, other: Self) -> Self {
        Self {
            ttft: self.ttft.min(other.ttft),
            tpot: self.tpot.min(other.tpot),
        }
    }
}

/// One class of requests: nominal SLO, priority level, and length statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// Absolute targets; used directly in SLO mode and as the reporting target in priority mode.
    pub slo: SloSpec<f64>,
    /// Priority level, 0 = highest. Only consulted in priority mode.
    pub priority: u32,
    pub input_len_mean: f64,
    pub input_len_std: f64,
    pub output_len_mean: f64,
    pub output_len_std: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        SloSpec::new(self.slo.ttft, self.slo.tpot)?;
        let ok = self.input_len_mean > 0.0
            && self.output_len_mean > 0.0
            && self.input_len_std >= 0.0
            && self.output_len_std >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "task {}: length means must be > 0 and stds >= 0",
                self.name
            )));
        }
        Ok(())
    }
}

fn task(
    name: &str,
    ttft: f64,
    tpot: f64,
    priority: u32,
    input: (f64, f64),
    output: (f64, f64),
) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        slo: SloSpec { ttft, tpot },
        priority,
        input_len_mean: input.0,
        input_len_std: input.1,
        output_len_mean: output.0,
        output_len_std: output.1,
    }
}

/// The benchmark task mixes: `4task` and `2task`.
///
/// Priorities follow row order, so the tightest SLO gets priority 0.
pub fn builtin_task_sets() -> BTreeMap<&'static str, Vec<TaskSpec>> {
    let mut sets = BTreeMap::new();
    sets.insert(
        "4task",
        vec![
            task("medical_qa", 0.7, 0.5, 0, (32.57, 10.32), (38.92, 16.83)),
            task(
                "tldr_content_gen",
                1.0,
                0.7,
                1,
                (44.38, 6.58),
                (96.04, 35.03),
            ),
            task(
                "tldr_headline_gen",
                2.0,
                0.9,
                2,
                (121.82, 35.04),
                (13.59, 6.55),
            ),
            task("wikisql", 20.0, 1.0, 3, (643.22, 337.01), (27.82, 4.84)),
        ],
    );
    sets.insert(
        "2task",
        vec![
            task("gsm8k", 0.7, 0.2, 0, (51.44, 15.78), (90.13, 26.73)),
            task("sharegpt", 2.0, 0.5, 1, (259.19, 324.88), (207.79, 234.99)),
        ],
    );
    sets
}

pub fn task_set(name: &str) -> Result<Vec<TaskSpec>> {
    builtin_task_sets()
        .remove(name)
        .ok_or_else(|| Error::UnknownTaskSet(name.to_string()))
}

/// Per-stage timestamps, in simulated seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timestamps {
    pub dispatch: Option<f64>,
    pub prefill_start: Option<f64>,
    pub first_token: Option<f64>,
    pub migration_start: Option<f64>,
    pub migration_end: Option<f64>,
    pub completion: Option<f64>,
}

impl Timestamps {
    /// True when every set timestamp is no earlier than the previously set one.
    pub fn is_monotone(&self, arrival: f64) -> bool {
        let order = [
            self.dispatch,
            self.prefill_start,
            self.first_token,
            self.migration_start,
            self.migration_end,
            self.completion,
        ];
        let mut last = arrival;
        for t in order.into_iter().flatten() {
            if t < last {
                return false;
            }
            last = t;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    /// Index into the run's task list.
    pub task: usize,
    pub arrival_time: f64,
    pub input_len: u32,
    /// Ground truth, visible to the simulator only.
    pub output_len: u32,
    /// Present in priority mode.
    pub priority: Option<u32>,
    /// Targets the scheduler works with; assigned on arrival in priority mode.
    pub slo: Option<SloSpec<f64>>,
    pub timestamps: Timestamps,
}

impl Request {
    pub fn ttft(&self) -> Option<f64> {
        self.timestamps.first_token.map(|t| t - self.arrival_time)
    }

    /// Mean time per token after the first; zero for single-token outputs.
    pub fn tpot(&self) -> Option<f64> {
        let first = self.timestamps.first_token?;
        let done = self.timestamps.completion?;
        if self.output_len <= 1 {
            Some(0.0)
        } else {
            Some((done - first) / f64::from(self.output_len - 1))
        }
    }

    pub fn e2e(&self) -> Option<f64> {
        self.timestamps.completion.map(|t| t - self.arrival_time)
    }

    pub fn queue_time(&self) -> Option<f64> {
        self.timestamps.dispatch.map(|t| t - self.arrival_time)
    }
}

/// A constant-rate Poisson arrival segment for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    /// Index into the task list.
    pub task: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub qps: f64,
}

fn sample_len<R: Rng>(rng: &mut R, mean: f64, std: f64) -> u32 {
    let v = if std > 0.0 {
        Normal::new(mean, std).expect("valid normal").sample(rng)
    } else {
        mean
    };
    v.round().clamp(1.0, f64::from(u32::MAX)) as u32
}

fn finalize(
    mut raw: Vec<(f64, usize, u32, u32)>,
    tasks: &[TaskSpec],
    priority_mode: bool,
) -> Vec<Request> {
    // stable sort keeps per-task generation order for simultaneous arrivals
    raw.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    raw.into_iter()
        .enumerate()
        .map(|(i, (arrival, task, input_len, output_len))| Request {
            id: i as u64,
            task,
            arrival_time: arrival,
            input_len,
            output_len,
            priority: priority_mode.then_some(tasks[task].priority),
            slo: (!priority_mode).then_some(tasks[task].slo),
            timestamps: Timestamps::default(),
        })
        .collect()
}

fn task_rng(seed: u64, task: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 8) | salt);
    rng
}

/// Generates `per_task_count` requests per task, each task an independent
/// Poisson process at `qps / tasks.len()`, merged and sorted by arrival.
pub fn generate(
    tasks: &[TaskSpec],
    per_task_count: usize,
    qps: f64,
    seed: u64,
    priority_mode: bool,
) -> Result<Vec<Request>> {
    if !(qps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "qps must be > 0, got {qps}"
        )));
    }
    if per_task_count == 0 || tasks.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one task and one request per task".into(),
        ));
    }
    for t in tasks {
        t.validate()?;
    }
    let per_task_rate = qps / tasks.len() as f64;
    let mut raw = Vec::with_capacity(per_task_count * tasks.len());
    for (ti, t) in tasks.iter().enumerate() {
        let mut rng = task_rng(seed, ti, 0);
        let gap = Exp::new(per_task_rate).expect("positive rate");
        let mut now = 0.0;
        for _ in 0..per_task_count {
            now += gap.sample(&mut rng);
            let input = sample_len(&mut rng, t.input_len_mean, t.input_len_std);
            let output = sample_len(&mut rng, t.output_len_mean, t.output_len_std);
            raw.push((now, ti, input, output));
        }
    }
    Ok(finalize(raw, tasks, priority_mode))
}

/// Generates Poisson arrivals over explicit per-task rate segments.
pub fn generate_segments(
    tasks: &[TaskSpec],
    segments: &[Segment],
    seed: u64,
    priority_mode: bool,
) -> Result<Vec<Request>> {
    for t in tasks {
        t.validate()?;
    }
    let mut raw = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        if seg.task >= tasks.len() {
            return Err(Error::InvalidArgument(format!(
                "segment {si} references task {}",
                seg.task
            )));
        }
        if !(seg.qps > 0.0) || !(seg.end_s > seg.start_s) {
            return Err(Error::InvalidArgument(format!(
                "segment {si} needs qps > 0 and end > start"
            )));
        }
        let t = &tasks[seg.task];
        let mut rng = task_rng(seed, seg.task, 1 + si as u64);
        let gap = Exp::new(seg.qps).expect("positive rate");
        let mut now = seg.start_s;
        loop {
            now += gap.sample(&mut rng);
            if now >= seg.end_s {
                break;
            }
            let input = sample_len(&mut rng, t.input_len_mean, t.input_len_std);
            let output = sample_len(&mut rng, t.output_len_mean, t.output_len_std);
            raw.push((now, seg.task, input, output));
        }
    }
    Ok(finalize(raw, tasks, priority_mode))
}

/// Staggered priority ramp: the lowest-priority task starts at `t = 0` and
/// each higher priority joins `stagger_s` later, every client at `qps_each`,
/// all running until `end_s`.
pub fn ramp_segments(
    tasks: &[TaskSpec],
    qps_each: f64,
    stagger_s: f64,
    end_s: f64,
) -> Vec<Segment> {
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(tasks[i].priority));
    order
        .into_iter()
        .enumerate()
        .map(|(k, task)| Segment {
            task,
            start_s: k as f64 * stagger_s,
            end_s,
            qps: qps_each,
        })
        .collect()
}

/// Alternating high/low load phases with every task active in each phase.
pub fn bursty_segments(
    tasks: &[TaskSpec],
    high_qps: f64,
    low_qps: f64,
    phase_s: f64,
    phases: usize,
) -> Vec<Segment> {
    let n = tasks.len() as f64;
    (0..phases)
        .flat_map(|p| {
            let qps = if p % 2 == 0 { high_qps } else { low_qps };
            (0..tasks.len()).map(move |task| Segment {
                task,
                start_s: p as f64 * phase_s,
                end_s: (p + 1) as f64 * phase_s,
                qps: qps / n,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    id: u64,
    task: String,
    arrival_s: f64,
    input_len: u32,
    output_len: u32,
    priority_or_ttft: String,
    tpot: String,
}

/// Writes a trace as `id,task,arrival_s,input_len,output_len,priority_or_ttft,tpot`.
/// Priority-mode requests leave `tpot` empty.
pub fn write_trace<W: Write>(writer: W, trace: &[Request], tasks: &[TaskSpec]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in trace {
        let (first, tpot) = match (r.priority, r.slo) {
            (Some(p), _) => (p.to_string(), String::new()),
            (None, Some(slo)) => (slo.ttft.to_string(), slo.tpot.to_string()),
            (None, None) => {
                return Err(Error::InvalidArgument(format!(
                    "request {} has neither SLO nor priority",
                    r.id
                )))
            }
        };
        wtr.serialize(TraceRow {
            id: r.id,
            task: tasks[r.task].name.clone(),
            arrival_s: r.arrival_time,
            input_len: r.input_len,
            output_len: r.output_len,
            priority_or_ttft: first,
            tpot,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_trace`]; task names must appear in `tasks`.
pub fn read_trace<R: Read>(reader: R, tasks: &[TaskSpec]) -> Result<Vec<Request>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: Vec<Request> = Vec::new();
    for (i, row) in rdr.deserialize::<TraceRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        let bad = |detail: String| Error::Malformed { line, detail };
        let task = tasks
            .iter()
            .position(|t| t.name == row.task)
            .ok_or_else(|| bad(format!("unknown task `{}`", row.task)))?;
        if row.input_len == 0 || row.output_len == 0 {
            return Err(bad("lengths must be >= 1".into()));
        }
        let (priority, slo) = if row.tpot.trim().is_empty() {
            let p = row
                .priority_or_ttft
                .trim()
                .parse::<u32>()
                .map_err(|e| bad(format!("priority: {e}")))?;
            (Some(p), None)
        } else {
            let ttft = row
                .priority_or_ttft
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("ttft: {e}")))?;
            let tpot = row
                .tpot
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("tpot: {e}")))?;
            (
                None,
                Some(SloSpec::new(ttft, tpot).map_err(|e| bad(e.to_string()))?),
            )
        };
        if let Some(prev) = out.last() {
            if row.arrival_s < prev.arrival_time {
                return Err(bad("trace must be sorted by arrival".into()));
            }
        }
        out.push(Request {
            id: row.id,
            task,
            arrival_time: row.arrival_s,
            input_len: row.input_len,
            output_len: row.output_len,
            priority,
            slo,
            timestamps: Timestamps::default(),
        });
    }
    Ok(out)
}
