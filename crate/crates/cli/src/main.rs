//! `slosim`: run simulations, sweep QPS grids, fit latency models and
//! compare run summaries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use slosim::config::RunConfig;
use slosim::latency::{self, LatencyModel};
use slosim::metrics::{self, RunReport};
use slosim::sim::{self, log, Mode, Policy};
use slosim::Error;

#[derive(Parser)]
#[command(name = "slosim", version, about = "Multi-SLO LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write events.csv, requests.csv and summary.json.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Overrides,
        /// Aggregate arrival rate.
        #[arg(long)]
        qps: Option<f64>,
        /// Random seed for the workload and the scaler.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of QPS values, seeds and policies and write sweep.csv.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        common: Overrides,
        #[arg(long, value_delimiter = ',', required = true)]
        qps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Policies to compare; defaults to the config's policy plus `--policy`.
        #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
        policies: Vec<Policy>,
    },
    /// Fit latency coefficients from profiling samples
    /// (`batch_size,input_lengths,prefill_s,decode_step_s`).
    Fit {
        samples: PathBuf,
        /// Output JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the differences between two summary.json files.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    /// Output directory.
    #[arg(long, env = "SLOSIM_OUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    match s {
        "slo_aware" => Ok(Policy::SloAware),
        "round_robin" | "rr" => Ok(Policy::RoundRobin),
        _ => Err(format!("unknown policy `{s}` (slo_aware, round_robin)")),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "collocated" => Ok(Mode::Collocated),
        "pd_disaggregated" | "pd" => Ok(Mode::PdDisaggregated),
        _ => Err(format!("unknown mode `{s}` (collocated, pd_disaggregated)")),
    }
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::SimulationStall { .. } => 3,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    let mut cfg = RunConfig::from_toml(&text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })?;
    if let Some(p) = o.policy {
        cfg.dispatch_policy = p;
    }
    if let Some(m) = o.mode {
        cfg.mode = m;
    }
    if let Some(dir) = &o.out {
        cfg.output_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("slosim-out"))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path).map_err(io_at(path))?))
}

fn simulate(
    cfg: &RunConfig,
    base_dir: Option<&Path>,
    record_log: bool,
) -> Result<sim::SimOutput, Failure> {
    let mut sim_cfg = cfg.sim_config()?;
    sim_cfg.record_log = record_log;
    let trace = cfg.workload.trace(&sim_cfg.tasks, cfg.seed, base_dir)?;
    Ok(sim::run(&sim_cfg, &trace)?)
}

fn cmd_run(path: &Path, o: &Overrides, qps: Option<f64>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(path, o)?;
    if let Some(q) = qps {
        cfg.workload.qps = q;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = simulate(&cfg, path.parent(), true)?;
    let dir = output_dir(&cfg);
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;

    let mut w = create(&dir.join("events.csv"))?;
    log::write_log_csv(&mut w, &out.log)?;
    w.flush()?;
    let mut w = create(&dir.join("requests.csv"))?;
    metrics::write_results_csv(&mut w, &out.results)?;
    w.flush()?;
    let report = out.report();
    let mut w = create(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(Error::from)?;
    writeln!(w)?;
    w.flush()?;

    println!(
        "attainment {} cost_units {} completed {}/{} -> {}",
        fmt_opt(report.attainment),
        report.cost_units,
        report.completed,
        report.requests,
        dir.display()
    );
    if report.incomplete > 0 {
        return Err(Failure {
            code: 3,
            message: format!(
                "deadline reached with {} unfinished request(s)",
                report.incomplete
            ),
        });
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

#[derive(Serialize)]
struct SweepRow {
    qps: String,
    seed: String,
    policy: &'static str,
    attainment: String,
    cost_units: String,
    p50: String,
    p95: String,
    p99: String,
}

struct Cell {
    qps: f64,
    seed: u64,
    policy: Policy,
    report: RunReport,
}

/// Sample mean and standard deviation (zero for a single value).
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

fn agg(values: impl Iterator<Item = Option<f64>>) -> String {
    let v: Vec<f64> = values.flatten().collect();
    mean_std(&v)
        .map(|(m, s)| format!("{m}±{s}"))
        .unwrap_or_default()
}

fn cmd_sweep(
    path: &Path,
    o: &Overrides,
    qps: &[f64],
    seeds: &[u64],
    policies: &[Policy],
) -> Result<(), Failure> {
    let base = load_config(path, o)?;
    if qps.is_empty() || seeds.is_empty() {
        return Err(Failure {
            code: 2,
            message: "sweep needs at least one qps and one seed".into(),
        });
    }
    let policies: Vec<Policy> = if policies.is_empty() {
        vec![base.dispatch_policy]
    } else {
        policies.to_vec()
    };
    let mut grid: Vec<(f64, u64, Policy)> = Vec::new();
    for &q in qps {
        for &s in seeds {
            grid.extend(policies.iter().map(|&p| (q, s, p)));
        }
    }

    let outcomes: Vec<Result<Cell, Failure>> = grid
        .par_iter()
        .map(|&(q, seed, policy)| {
            let mut cfg = base.clone();
            cfg.workload.qps = q;
            cfg.seed = seed;
            cfg.dispatch_policy = policy;
            let out = simulate(&cfg, path.parent(), false).map_err(|f| Failure {
                message: format!("qps={q} seed={seed} {}: {}", policy.as_str(), f.message),
                ..f
            })?;
            Ok(Cell {
                qps: q,
                seed,
                policy,
                report: out.report(),
            })
        })
        .collect();

    let mut cells = Vec::new();
    let mut failure = None;
    for o in outcomes {
        match o {
            Ok(c) => cells.push(c),
            Err(f) if failure.is_none() => failure = Some(f),
            Err(_) => {}
        }
    }

    let dir = output_dir(&base);
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let file = dir.join("sweep.csv");
    let mut wtr = csv::Writer::from_writer(create(&file)?);
    for c in &cells {
        wtr.serialize(SweepRow {
            qps: c.qps.to_string(),
            seed: c.seed.to_string(),
            policy: c.policy.as_str(),
            attainment: fmt_opt(c.report.attainment),
            cost_units: c.report.cost_units.to_string(),
            p50: fmt_opt(c.report.p50_e2e_s),
            p95: fmt_opt(c.report.p95_e2e_s),
            p99: fmt_opt(c.report.p99_e2e_s),
        })
        .map_err(Error::from)?;
    }
    if failure.is_none() {
        for &q in qps {
            for &p in &policies {
                let group: Vec<&RunReport> = cells
                    .iter()
                    .filter(|c| c.qps == q && c.policy == p)
                    .map(|c| &c.report)
                    .collect();
                wtr.serialize(SweepRow {
                    qps: q.to_string(),
                    seed: "mean±std".into(),
                    policy: p.as_str(),
                    attainment: agg(group.iter().map(|r| r.attainment)),
                    cost_units: agg(group.iter().map(|r| Some(r.cost_units as f64))),
                    p50: agg(group.iter().map(|r| r.p50_e2e_s)),
                    p95: agg(group.iter().map(|r| r.p95_e2e_s)),
                    p99: agg(group.iter().map(|r| r.p99_e2e_s)),
                })
                .map_err(Error::from)?;
            }
        }
    }
    wtr.flush()?;
    println!("{} run(s) -> {}", cells.len(), file.display());
    match failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn cmd_fit(samples: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let file = File::open(samples).map_err(io_at(samples))?;
    let samples = latency::read_samples_csv(file)?;
    let report = LatencyModel::<f64>::fit_report(&samples)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}")?;
            w.flush()?;
        }
        None => println!("{json}"),
    }
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<RunReport, Failure> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn cmd_compare(baseline: &Path, candidate: &Path) -> Result<(), Failure> {
    let a = read_report(baseline)?;
    let b = read_report(candidate)?;
    let rows: [(&str, Option<f64>, Option<f64>); 8] = [
        ("attainment", a.attainment, b.attainment),
        (
            "cost_units",
            Some(a.cost_units as f64),
            Some(b.cost_units as f64),
        ),
        ("p50_e2e_s", a.p50_e2e_s, b.p50_e2e_s),
        ("p95_e2e_s", a.p95_e2e_s, b.p95_e2e_s),
        ("p99_e2e_s", a.p99_e2e_s, b.p99_e2e_s),
        ("requests", Some(a.requests as f64), Some(b.requests as f64)),
        (
            "completed",
            Some(a.completed as f64),
            Some(b.completed as f64),
        ),
        (
            "incomplete",
            Some(a.incomplete as f64),
            Some(b.incomplete as f64),
        ),
    ];
    println!(
        "{:<12} {:>14} {:>14} {:>14} {:>9}",
        "metric", "baseline", "candidate", "delta", "ratio"
    );
    for (name, x, y) in rows {
        let delta = x.zip(y).map(|(x, y)| y - x);
        let ratio = x.zip(y).and_then(|(x, y)| (x != 0.0).then(|| y / x));
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        let ratio = ratio
            .map(|r| format!("{r:.3}x"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{name:<12} {:>14} {:>14} {:>14} {ratio:>9}",
            cell(x),
            cell(y),
            cell(delta)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            common,
            qps,
            seed,
        } => cmd_run(config, common, *qps, *seed),
        Command::Sweep {
            config,
            common,
            qps,
            seeds,
            policies,
        } => {
            let mut policies = policies.clone();
            if let Some(p) = common.policy {
                if !policies.contains(&p) {
                    policies.push(p);
                }
            }
            cmd_sweep(config, common, qps, seeds, &policies)
        }
        Command::Fit { samples, out } => cmd_fit(samples, out.as_deref()),
        Command::Compare {
            baseline,
            candidate,
        } => cmd_compare(baseline, candidate),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
