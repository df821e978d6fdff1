use slosim::sim::{self, KvLinkModel, Mode, Policy, SimConfig};
use slosim::workload::{self, Request, SloSpec, TaskSpec, Timestamps};
use slosim::LatencyModel;

fn one_task() -> Vec<TaskSpec> {
    vec![TaskSpec {
        name: "t".into(),
        slo: SloSpec {
            ttft: 5.0,
            tpot: 1.0,
        },
        priority: 0,
        input_len_mean: 100.0,
        input_len_std: 0.0,
        output_len_mean: 3.0,
        output_len_std: 0.0,
    }]
}

fn request(id: u64, arrival: f64, input_len: u32, output_len: u32) -> Request {
    Request {
        id,
        task: 0,
        arrival_time: arrival,
        input_len,
        output_len,
        priority: None,
        slo: None,
        timestamps: Timestamps::default(),
    }
}

fn flat_model() -> LatencyModel {
    LatencyModel {
        a: 0.1,
        b: 0.0,
        c: 0.0,
        a_prime: 0.05,
        b_prime: 0.0,
        c_prime: 0.0,
    }
}

#[test]
fn single_request_timeline() {
    for policy in [Policy::SloAware, Policy::RoundRobin] {
        let mut cfg = SimConfig::new(flat_model(), one_task(), 1);
        cfg.policy = policy;
        let out = sim::run(&cfg, &[request(0, 1.5, 100, 3)]).unwrap();
        let ts = out.requests[0].timestamps;
        assert!(
            (ts.first_token.unwrap() - 1.6).abs() < 1e-12,
            "{policy:?} {ts:?}"
        );
        assert!(
            (ts.completion.unwrap() - 1.7).abs() < 1e-12,
            "{policy:?} {ts:?}"
        );
    }
}

#[test]
fn empty_trace_costs_nothing_extra() {
    let cfg = SimConfig::new(flat_model(), one_task(), 2);
    let out = sim::run(&cfg, &[]).unwrap();
    assert!(out.results.is_empty());
    assert_eq!(out.report().cost_units, 0);
}

#[test]
fn prefill_step_duration_matches_model() {
    let m = LatencyModel {
        a: 0.01,
        b: 1e-4,
        c: 1e-8,
        a_prime: 0.0,
        b_prime: 0.0,
        c_prime: 0.0,
    };
    let cfg = SimConfig::new(m, one_task(), 1);
    let out = sim::run(&cfg, &[request(0, 0.0, 100, 1)]).unwrap();
    let ts = out.requests[0].timestamps;
    assert!((ts.first_token.unwrap() - 0.0201).abs() < 1e-12);
    // single-token output completes at its first token
    assert_eq!(ts.completion, ts.first_token);
}

#[test]
fn simultaneous_requests_share_a_prefill() {
    let m = LatencyModel {
        a: 0.01,
        b: 1e-4,
        c: 1e-8,
        a_prime: 0.02,
        b_prime: 1e-5,
        c_prime: 1e-3,
    };
    let cfg = SimConfig::new(m, one_task(), 1);
    let out = sim::run(&cfg, &[request(0, 0.0, 100, 2), request(1, 0.0, 200, 2)]).unwrap();
    let a = out.requests[0].timestamps.first_token.unwrap();
    let b = out.requests[1].timestamps.first_token.unwrap();
    assert_eq!(a, b);
    let expect = 0.01 + 1e-4 * 300.0 + 1e-8 * (100.0f64 * 100.0 + 200.0 * 200.0);
    assert!((a - expect).abs() < 1e-12);
    assert_eq!(out.stats.prefill_steps, 1);
}

#[test]
fn decode_step_duration_matches_model() {
    let m = LatencyModel {
        a: 0.0,
        b: 0.0,
        c: 0.0,
        a_prime: 0.02,
        b_prime: 1e-5,
        c_prime: 1e-3,
    };
    let cfg = SimConfig::new(m, one_task(), 1);
    // after prefill the request has length 100: input 99 plus the first token
    let out = sim::run(&cfg, &[request(0, 0.0, 99, 2)]).unwrap();
    let ts = out.requests[0].timestamps;
    assert!((ts.completion.unwrap() - ts.first_token.unwrap() - 0.022).abs() < 1e-12);
}

#[test]
fn migration_delay_is_linear_in_length() {
    let m = LatencyModel {
        a: 0.1,
        b: 0.0,
        c: 0.0,
        a_prime: 0.05,
        b_prime: 0.0,
        c_prime: 0.0,
    };
    let mut cfg = SimConfig::new(m, one_task(), 1);
    cfg.mode = Mode::PdDisaggregated;
    cfg.link = KvLinkModel {
        base_latency_s: 0.005,
        per_token_s: 1e-6,
    };
    for policy in [Policy::SloAware, Policy::RoundRobin] {
        cfg.policy = policy;
        let out = sim::run(&cfg, &[request(0, 0.0, 499, 3)]).unwrap();
        let ts = out.requests[0].timestamps;
        let start = ts.migration_start.unwrap();
        assert!(start >= ts.first_token.unwrap());
        assert!((ts.migration_end.unwrap() - start - 0.0055).abs() < 1e-12);
        assert!(ts.is_monotone(0.0));
        assert_eq!(out.stats.one_shot_violations, 0);
    }
}

#[test]
fn oversized_request_stalls() {
    let mut cfg = SimConfig::new(flat_model(), one_task(), 1);
    cfg.kv_capacity = 50;
    cfg.stall_timeout_s = 5.0;
    for policy in [Policy::SloAware, Policy::RoundRobin] {
        cfg.policy = policy;
        let err = sim::run(&cfg, &[request(7, 0.0, 100, 3)]).unwrap_err();
        match err {
            slosim::Error::SimulationStall { stuck, .. } => assert_eq!(stuck, vec![7]),
            other => panic!("unexpected {other}"),
        }
    }
}

#[test]
fn deadline_leaves_requests_incomplete() {
    let mut cfg = SimConfig::new(flat_model(), one_task(), 1);
    cfg.deadline_s = Some(1.0);
    let out = sim::run(&cfg, &[request(0, 0.0, 100, 3), request(1, 5.0, 100, 3)]).unwrap();
    assert_eq!(out.incomplete(), 1);
    assert_eq!(out.report().attainment, Some(0.5));
}

#[test]
fn four_task_runs_complete_in_all_modes() {
    let tasks = workload::task_set("4task").unwrap();
    let trace = workload::generate(&tasks, 60, 8.0, 3, false).unwrap();
    for mode in [Mode::Collocated, Mode::PdDisaggregated] {
        for policy in [Policy::SloAware, Policy::RoundRobin] {
            let mut cfg = SimConfig::new(LatencyModel::profile("7B").unwrap(), tasks.clone(), 2);
            cfg.mode = mode;
            cfg.policy = policy;
            let out = sim::run(&cfg, &trace).unwrap();
            assert_eq!(out.incomplete(), 0);
            for r in &out.requests {
                assert!(
                    r.timestamps.is_monotone(r.arrival_time),
                    "{mode:?} {policy:?} {r:?}"
                );
            }
            let firsts = out.log.iter().filter(|e| e.event == "first_token").count();
            let completions = out.log.iter().filter(|e| e.event == "completion").count();
            assert_eq!((firsts, completions), (trace.len(), trace.len()));
            let times: Vec<f64> = out.log.iter().map(|e| e.time_s).collect();
            assert!(times.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
