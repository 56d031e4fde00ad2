//! Cross-cutting engine behavior: determinism, conservation, policy
//! outcomes on small traces.

use agentsched::config::EngineConfig;
use agentsched::sim::{events_to_ndjson, run_policy, PolicyKind};
use agentsched::workload::{generate_trace, ArrivalModel};

fn cfg(backends: usize, capacity: u64) -> EngineConfig {
    let mut cfg = EngineConfig::standard();
    cfg.cluster.backends = backends;
    cfg.cluster.capacity_tokens = capacity;
    cfg
}

#[test]
fn replay_is_byte_identical() {
    let trace = generate_trace("mini-swe", 24, 5).unwrap();
    let a = run_policy(&trace, PolicyKind::ProgramAware, &cfg(2, 16384)).unwrap();
    let b = run_policy(&trace, PolicyKind::ProgramAware, &cfg(2, 16384)).unwrap();
    assert_eq!(events_to_ndjson(&a.events), events_to_ndjson(&b.events));
    assert_eq!(a.report, b.report);
}

#[test]
fn token_conservation_across_policies() {
    let trace = generate_trace("mini-swe", 16, 3).unwrap();
    let scripted: u64 = trace
        .programs
        .iter()
        .map(|p| p.total_scripted_tokens())
        .sum();
    for policy in [
        PolicyKind::ProgramAware,
        PolicyKind::RequestAware,
        PolicyKind::TtlPin {
            predictor: Default::default(),
        },
        PolicyKind::PinnedRouting,
    ] {
        let out = run_policy(&trace, policy, &cfg(2, 16384)).unwrap();
        let total: u64 = out.per_program.iter().map(|p| p.total_tokens).sum();
        assert_eq!(total, scripted, "policy {policy:?} changed outputs");
        assert!(out.per_program.iter().all(|p| p.stopped));
        let steps: u64 = out.per_program.iter().map(|p| p.steps).sum();
        let scripted_steps: u64 = trace.programs.iter().map(|p| p.tool_steps()).sum();
        assert_eq!(steps, scripted_steps);
    }
}

#[test]
fn no_pressure_regime_has_full_hit_rate() {
    let trace = generate_trace("mini-swe", 6, 9).unwrap();
    for policy in [PolicyKind::ProgramAware, PolicyKind::RequestAware] {
        let out = run_policy(&trace, policy, &cfg(2, 65536)).unwrap();
        // Below capacity nothing is ever evicted.
        assert_eq!(out.report.resume_misses, 0, "{policy:?}");
        assert_eq!(out.report.kv_hit_rate, Some(1.0), "{policy:?}");
        assert_eq!(out.report.pauses, 0, "{policy:?}");
    }
}

#[test]
fn open_loop_arrivals_are_deterministic() {
    let mut trace = generate_trace("mini-swe", 12, 4).unwrap();
    trace.arrival = ArrivalModel::Open {
        mean_interarrival: 40.0,
    };
    let a = run_policy(&trace, PolicyKind::ProgramAware, &cfg(2, 16384)).unwrap();
    let b = run_policy(&trace, PolicyKind::ProgramAware, &cfg(2, 16384)).unwrap();
    assert_eq!(events_to_ndjson(&a.events), events_to_ndjson(&b.events));
    assert!(a.report.completed_programs == 12);
}

#[test]
fn duration_cap_zero_yields_empty_report() {
    let trace = generate_trace("mini-swe", 4, 1).unwrap();
    let mut c = cfg(2, 16384);
    c.duration_ticks = Some(0);
    let out = run_policy(&trace, PolicyKind::ProgramAware, &c).unwrap();
    assert_eq!(out.report.total_steps, 0);
    assert_eq!(out.report.duration_ticks, 0);
    assert!(out.events.is_empty());
}

#[test]
fn pool_bound_and_probe_diagnostics() {
    // Pressure probe across concurrency levels; prints load-bearing
    // diagnostics for preset calibration.
    for n in [8usize, 16, 32, 64] {
        let trace = generate_trace("mini-swe", (2 * n).max(n + 16), 7).unwrap();
        let mut c = cfg(2, 16384);
        c.duration_ticks = Some(120_000);
        let mut t = trace.clone();
        t.arrival = ArrivalModel::Closed { concurrency: n };
        for policy in [PolicyKind::ProgramAware, PolicyKind::RequestAware] {
            let out = run_policy(&t, policy, &c).unwrap();
            println!(
                "n={n:3} {:14} steps/min={:8.2} hit={:?} pauses={} misses={} stalls={} forced={} end={}",
                format!("{:?}", policy),
                out.report.throughput_steps_per_min,
                out.report.kv_hit_rate.map(|h| (h * 10000.0).round() / 10000.0),
                out.report.pauses,
                out.report.resume_misses,
                out.report.decode_stall_ticks,
                out.report.forced_reasoning_evictions,
                out.end_tick,
            );
        }
    }
}
