//! Event log records and CSV output.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_s: f64,
    pub event: String,
    pub request_id: Option<u64>,
    pub worker_id: Option<usize>,
    pub detail: String,
}

pub fn write_log_csv<W: Write>(w: W, log: &[LogEntry]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for e in log {
        out.serialize(e)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log_csv<R: Read>(r: R) -> Result<Vec<LogEntry>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Malformed {
                line: i as u64 + 2,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Billing spans reconstructed from `worker_start` / `worker_stop` rows.
pub fn spans_from_log(log: &[LogEntry]) -> Vec<crate::metrics::Span> {
    let mut open: std::collections::BTreeMap<usize, f64> = Default::default();
    let mut spans = Vec::new();
    for e in log {
        let Some(w) = e.worker_id else { continue };
        match e.event.as_str() {
            "worker_start" => {
                open.insert(w, e.time_s);
            }
            "worker_stop" => {
                if let Some(start) = open.remove(&w) {
                    spans.push(crate::metrics::Span {
                        worker: w,
                        start,
                        end: e.time_s,
                    });
                }
            }
            _ => {}
        }
    }
    spans
}
