//! Attainment, cost, and latency summaries computed from per-request results
//! and worker activity spans.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of one cost unit: a worker active for 50 ms.
pub const COST_UNIT_S: f64 = 0.05;

/// Outcome of one request as measured by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestResult {
    pub id: u64,
    pub task: String,
    pub priority: Option<u32>,
    pub arrival: f64,
    pub dispatch: Option<f64>,
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
    pub output_len: u32,
    /// Targets the request is judged against.
    pub target_ttft: f64,
    pub target_tpot: f64,
}

impl RequestResult {
    pub fn ttft(&self) -> Option<f64> {
        self.first_token.map(|t| t - self.arrival)
    }

    /// Mean time per token after the first; 0 for single-token outputs.
    pub fn tpot(&self) -> Option<f64> {
        let (first, done) = (self.first_token?, self.completion?);
        Some(if self.output_len > 1 {
            (done - first) / f64::from(self.output_len - 1)
        } else {
            0.0
        })
    }

    pub fn e2e(&self) -> Option<f64> {
        self.completion.map(|t| t - self.arrival)
    }

    pub fn ttft_met(&self) -> bool {
        self.completion.is_some() && self.ttft().is_some_and(|t| t <= self.target_ttft)
    }

    pub fn tpot_met(&self) -> bool {
        self.tpot().is_some_and(|t| t <= self.target_tpot)
    }

    pub fn met(&self) -> bool {
        self.ttft_met() && self.tpot_met()
    }
}

/// Interval during which a worker was billed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub worker: usize,
    pub start: f64,
    pub end: f64,
}

/// Fraction of requests meeting both targets; `None` with no requests.
pub fn attainment(results: &[RequestResult]) -> Option<f64> {
    if results.is_empty() {
        return None;
    }
    Some(results.iter().filter(|r| r.met()).count() as f64 / results.len() as f64)
}

/// Active seconds per worker.
pub fn active_seconds(spans: &[Span]) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for s in spans {
        *out.entry(s.worker).or_insert(0.0) += (s.end - s.start).max(0.0);
    }
    out
}

/// Σ active seconds × `unit_cost`.
pub fn cost(spans: &[Span], unit_cost: f64) -> f64 {
    active_seconds(spans).values().sum::<f64>() * unit_cost
}

/// Cost in 50 ms units, rounded up per worker.
pub fn cost_units(spans: &[Span]) -> u64 {
    active_seconds(spans).values().map(|&s| units_for(s)).sum()
}

fn units_for(seconds: f64) -> u64 {
    // The tolerance keeps exact multiples such as 10 s from rounding up.
    (seconds / COST_UNIT_S - 1e-9).ceil().max(0.0) as u64
}

/// Nearest-rank percentile of an ascending slice, `q` in (0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Violations {
    pub ttft_only: u64,
    pub tpot_only: u64,
    pub both: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub requests: u64,
    pub attainment: Option<f64>,
    pub p50_ttft_s: Option<f64>,
    pub p99_ttft_s: Option<f64>,
    pub p50_tpot_s: Option<f64>,
    pub p50_e2e_s: Option<f64>,
    pub violations: Violations,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub attainment: Option<f64>,
    pub cost_units: u64,
    pub cost_seconds: f64,
    pub p50_e2e_s: Option<f64>,
    pub p95_e2e_s: Option<f64>,
    pub p99_e2e_s: Option<f64>,
    pub requests: u64,
    pub completed: u64,
    pub incomplete: u64,
    pub per_task: BTreeMap<String, GroupReport>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_priority: BTreeMap<u32, GroupReport>,
    pub violations: Violations,
    /// Free-form counters reported by the simulator.
    #[serde(default)]
    pub stats: BTreeMap<String, f64>,
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

fn violations<'a>(results: impl Iterator<Item = &'a RequestResult>) -> Violations {
    let mut v = Violations::default();
    for r in results {
        match (r.ttft_met(), r.tpot_met()) {
            (true, true) => {}
            (false, true) => v.ttft_only += 1,
            (true, false) => v.tpot_only += 1,
            (false, false) => v.both += 1,
        }
    }
    v
}

fn group(results: &[&RequestResult]) -> GroupReport {
    let ttft = sorted(results.iter().filter_map(|r| r.ttft()));
    let tpot = sorted(results.iter().filter_map(|r| r.tpot()));
    let e2e = sorted(results.iter().filter_map(|r| r.e2e()));
    GroupReport {
        requests: results.len() as u64,
        attainment: if results.is_empty() {
            None
        } else {
            Some(results.iter().filter(|r| r.met()).count() as f64 / results.len() as f64)
        },
        p50_ttft_s: percentile(&ttft, 50.0),
        p99_ttft_s: percentile(&ttft, 99.0),
        p50_tpot_s: percentile(&tpot, 50.0),
        p50_e2e_s: percentile(&e2e, 50.0),
        violations: violations(results.iter().copied()),
    }
}

pub fn summarize(results: &[RequestResult], spans: &[Span]) -> RunReport {
    let e2e = sorted(results.iter().filter_map(RequestResult::e2e));
    let completed = results.iter().filter(|r| r.completion.is_some()).count() as u64;

    let mut by_task: BTreeMap<String, Vec<&RequestResult>> = BTreeMap::new();
    let mut by_priority: BTreeMap<u32, Vec<&RequestResult>> = BTreeMap::new();
    for r in results {
        by_task.entry(r.task.clone()).or_default().push(r);
        if let Some(p) = r.priority {
            by_priority.entry(p).or_default().push(r);
        }
    }

    RunReport {
        attainment: attainment(results),
        cost_units: cost_units(spans),
        cost_seconds: cost(spans, 1.0),
        p50_e2e_s: percentile(&e2e, 50.0),
        p95_e2e_s: percentile(&e2e, 95.0),
        p99_e2e_s: percentile(&e2e, 99.0),
        requests: results.len() as u64,
        completed,
        incomplete: results.len() as u64 - completed,
        per_task: by_task.into_iter().map(|(k, v)| (k, group(&v))).collect(),
        per_priority: by_priority
            .into_iter()
            .map(|(k, v)| (k, group(&v)))
            .collect(),
        violations: violations(results.iter()),
        stats: BTreeMap::new(),
    }
}

/// One row of the per-request CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub id: u64,
    pub task: String,
    pub arrival_s: f64,
    pub first_token_s: Option<f64>,
    pub completion_s: Option<f64>,
    pub ttft_s: Option<f64>,
    pub tpot_s: Option<f64>,
    pub ttft_met: bool,
    pub tpot_met: bool,
}

impl From<&RequestResult> for ResultRow {
    fn from(r: &RequestResult) -> Self {
        Self {
            id: r.id,
            task: r.task.clone(),
            arrival_s: r.arrival,
            first_token_s: r.first_token,
            completion_s: r.completion,
            ttft_s: r.ttft(),
            tpot_s: r.tpot(),
            ttft_met: r.ttft_met(),
            tpot_met: r.tpot_met(),
        }
    }
}

pub fn write_results_csv<W: Write>(w: W, results: &[RequestResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in results {
        out.serialize(ResultRow::from(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| malformed(i, e)))
        .collect()
}

fn malformed(index: usize, e: csv::Error) -> Error {
    Error::Malformed {
        line: index as u64 + 2,
        detail: e.to_string(),
    }
}
