use agentsched::config::EngineConfig;
use agentsched::scheduler::DecaySpec;
use agentsched::sim::{run_policy, PolicyKind};
use agentsched::workload::{generate_trace, ArrivalModel};

fn main() {
    for capacity in [16384u64, 49152, 98304] {
        for n in [8usize, 16, 32, 64, 96, 192] {
            let trace = generate_trace("mini-swe", (2 * n).max(n + 16), 7).unwrap();
            let mut t = trace.clone();
            t.arrival = ArrivalModel::Closed { concurrency: n };
            for policy in [PolicyKind::ProgramAware, PolicyKind::RequestAware] {
                let mut cfg = EngineConfig::standard();
                cfg.cluster.backends = 2;
                cfg.cluster.capacity_tokens = capacity;
                cfg.scheduler.decay = DecaySpec::Constant1;
                cfg.duration_ticks = Some(2_000_000);
                match run_policy(&t, policy, &cfg) {
                    Ok(out) => println!(
                        "C={capacity:6} n={n:3} {:14} steps/min={:7.2} hit={} pauses={:4} misses={:4} stalls={:7} forced={} end={}",
                        policy.name(),
                        out.report.throughput_steps_per_min,
                        out.report
                            .kv_hit_rate
                            .map(|h| format!("{:.4}", h))
                            .unwrap_or("-".into()),
                        out.report.pauses,
                        out.report.resume_misses,
                        out.report.decode_stall_ticks,
                        out.report.forced_reasoning_evictions,
                        out.end_tick,
                    ),
                    Err(e) => println!("C={capacity:6} n={n:3} {:14} ERROR {e}", policy.name()),
                }
            }
        }
    }
}
