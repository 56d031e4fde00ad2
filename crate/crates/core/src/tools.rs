//! Simulated tool-environment lifecycle.
//!
//! Environments claim finite disk units and network ports, take a
//! preparation delay before first use, and are reclaimed by lifecycle hooks
//! the moment their owning program stops. Preparation can start while the
//! owner still waits in the queue, overlapping setup with reasoning time.

use crate::types::{EnvId, ProgramId, Tick};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("disk pool exhausted: need {needed} units, {available} free")]
    DiskExhausted { needed: u64, available: u64 },
    #[error("port pool exhausted")]
    PortsExhausted,
    #[error("environment already preparing for {0}")]
    AlreadyPreparing(ProgramId),
    #[error("environment {env} not ready until tick {ready_at}")]
    EnvNotReady { env: EnvId, ready_at: Tick },
    #[error("environment {env} owned by {owner}, not {caller}")]
    WrongOwner {
        env: EnvId,
        owner: ProgramId,
        caller: ProgramId,
    },
    #[error("program {0} still active; release hooks require Stopped")]
    ProgramStillActive(ProgramId),
    #[error("unknown environment {0}")]
    UnknownEnv(EnvId),
    #[error("invalid sampler: {0}")]
    InvalidSampler(String),
}

/// Tool latency model. Draws are always at least one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencySampler {
    Deterministic {
        ticks: u64,
    },
    /// Continuous exponential rounded up to whole ticks; the integer tail is
    /// geometric, so the memoryless property survives discretization.
    Exponential {
        mean: f64,
    },
    /// Piecewise log-linear inverse CDF through the configured quantiles,
    /// capped at `cap`. Matches the long-tail shape of remote-service tools.
    HeavyTailed {
        p50: u64,
        p95: u64,
        p99: u64,
        cap: u64,
    },
}

impl LatencySampler {
    pub fn validate(&self) -> Result<(), ToolError> {
        match *self {
            LatencySampler::Deterministic { ticks } if ticks >= 1 => Ok(()),
            LatencySampler::Deterministic { .. } => Err(ToolError::InvalidSampler(
                "deterministic draw must be >= 1 tick".into(),
            )),
            LatencySampler::Exponential { mean } if mean > 0.0 => Ok(()),
            LatencySampler::Exponential { .. } => Err(ToolError::InvalidSampler(
                "exponential mean must be positive".into(),
            )),
            LatencySampler::HeavyTailed { p50, p95, p99, cap } => {
                if 1 <= p50 && p50 <= p95 && p95 <= p99 && p99 <= cap {
                    Ok(())
                } else {
                    Err(ToolError::InvalidSampler(
                        "need 1 <= p50 <= p95 <= p99 <= cap".into(),
                    ))
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        match *self {
            LatencySampler::Deterministic { ticks } => ticks.max(1),
            LatencySampler::Exponential { mean } => {
                let u: f64 = rng.gen_range(0.0..1.0);
                (-mean * (1.0 - u).ln()).ceil().max(1.0) as u64
            }
            LatencySampler::HeavyTailed { p50, p95, p99, cap } => {
                let u: f64 = rng.gen_range(0.0..1.0);
                // Quantile knots: (0, 1) → (0.5, p50) → (0.95, p95)
                // → (0.99, p99) → (1.0, cap), interpolated in log space.
                let knots = [
                    (0.0, 1.0),
                    (0.5, p50 as f64),
                    (0.95, p95 as f64),
                    (0.99, p99 as f64),
                    (1.0, cap as f64),
                ];
                let mut value = cap as f64;
                for w in knots.windows(2) {
                    let (q0, v0) = w[0];
                    let (q1, v1) = w[1];
                    if u < q1 || (q1 == 1.0 && u <= 1.0) {
                        let frac = (u - q0) / (q1 - q0);
                        value = v0 * (v1 / v0).powf(frac);
                        break;
                    }
                }
                // Round-to-nearest keeps the CDF at each configured knot
                // strictly past its quantile, so empirical quantiles sit on
                // the knot values instead of flipping across them.
                (value.round().max(1.0) as u64).min(cap)
            }
        }
    }
}

/// Preparation lifecycle of one environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrepStatus {
    Preparing { ready_at: Tick },
    Ready,
    Released,
}

/// One simulated sandbox: a disk claim, a network port and a prep delay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEnvironment {
    pub env_id: EnvId,
    pub owner: ProgramId,
    pub profile: String,
    pub disk_units: u64,
    pub port: u16,
    pub prep_status: PrepStatus,
    pub prep_latency: Tick,
    pub prep_started: Tick,
}

impl ToolEnvironment {
    pub fn ready_at(&self) -> Tick {
        match self.prep_status {
            PrepStatus::Preparing { ready_at } => ready_at,
            _ => self.prep_started,
        }
    }
}

/// Named environment profile: what an `acquire_env` spec looks like in the
/// engine configuration and in trace presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvProfile {
    pub disk_units: u64,
    pub prep_latency: Tick,
    pub sampler: LatencySampler,
}

/// Finite disk and port pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcePools {
    pub disk_capacity: u64,
    pub disk_used: u64,
    pub port_start: u16,
    pub port_count: u16,
    ports_free: BTreeSet<u16>,
}

impl ResourcePools {
    pub fn new(disk_capacity: u64, port_start: u16, port_count: u16) -> Self {
        ResourcePools {
            disk_capacity,
            disk_used: 0,
            port_start,
            port_count,
            ports_free: (port_start..port_start.saturating_add(port_count)).collect(),
        }
    }

    pub fn ports_free(&self) -> usize {
        self.ports_free.len()
    }

    fn claim(&mut self, disk_units: u64) -> Result<u16, ToolError> {
        if self.disk_used + disk_units > self.disk_capacity {
            return Err(ToolError::DiskExhausted {
                needed: disk_units,
                available: self.disk_capacity - self.disk_used,
            });
        }
        let port = *self.ports_free.iter().next().ok_or(ToolError::PortsExhausted)?;
        self.ports_free.remove(&port);
        self.disk_used += disk_units;
        Ok(port)
    }

    fn credit(&mut self, disk_units: u64, port: u16) {
        self.disk_used -= disk_units;
        self.ports_free.insert(port);
    }
}

/// What a release reclaimed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Reclaimed {
    pub disk_units: u64,
    pub ports: u64,
}

/// Environment registry plus pools. GC hooks couple environment persistence
/// to the owning program's scheduling status; turning them off reproduces the
/// resource-leak failure mode.
#[derive(Debug, Clone)]
pub struct ToolManager {
    pub pools: ResourcePools,
    envs: BTreeMap<EnvId, ToolEnvironment>,
    by_owner: BTreeMap<ProgramId, Vec<EnvId>>,
    next_id: u64,
    pub hooks_enabled: bool,
    pub disk_peak: u64,
    /// Test hook: release failures injected per program.
    fail_release_for: BTreeSet<ProgramId>,
}

impl ToolManager {
    pub fn new(pools: ResourcePools, hooks_enabled: bool) -> Self {
        ToolManager {
            pools,
            envs: BTreeMap::new(),
            by_owner: BTreeMap::new(),
            next_id: 0,
            hooks_enabled,
            disk_peak: 0,
            fail_release_for: BTreeSet::new(),
        }
    }

    /// Allocates disk and a port and starts the preparation clock.
    pub fn acquire_env(
        &mut self,
        owner: &ProgramId,
        profile: &str,
        disk_units: u64,
        prep_latency: Tick,
        now: Tick,
    ) -> Result<EnvId, ToolError> {
        let port = self.pools.claim(disk_units)?;
        let env_id = EnvId(self.next_id);
        self.next_id += 1;
        let status = if prep_latency == 0 {
            PrepStatus::Ready
        } else {
            PrepStatus::Preparing {
                ready_at: now + prep_latency,
            }
        };
        self.envs.insert(
            env_id,
            ToolEnvironment {
                env_id,
                owner: owner.clone(),
                profile: profile.to_string(),
                disk_units,
                port,
                prep_status: status,
                prep_latency,
                prep_started: now,
            },
        );
        self.by_owner.entry(owner.clone()).or_default().push(env_id);
        self.disk_peak = self.disk_peak.max(self.pools.disk_used);
        Ok(env_id)
    }

    /// Starts preparation for `owner`'s profile if it has not started yet.
    /// Idempotent: a second call signals `AlreadyPreparing`.
    pub fn prepare_async(
        &mut self,
        owner: &ProgramId,
        profile: &str,
        disk_units: u64,
        prep_latency: Tick,
        now: Tick,
    ) -> Result<EnvId, ToolError> {
        if let Some(env) = self.env_for(owner, profile) {
            if env.prep_status != PrepStatus::Released {
                return Err(ToolError::AlreadyPreparing(owner.clone()));
            }
        }
        self.acquire_env(owner, profile, disk_units, prep_latency, now)
    }

    /// Flips Preparing environments whose clock has elapsed to Ready;
    /// returns them in id order.
    pub fn tick(&mut self, now: Tick) -> Vec<EnvId> {
        let mut ready = Vec::new();
        for (id, env) in self.envs.iter_mut() {
            if let PrepStatus::Preparing { ready_at } = env.prep_status {
                if ready_at <= now {
                    env.prep_status = PrepStatus::Ready;
                    ready.push(*id);
                }
            }
        }
        ready
    }

    pub fn env(&self, id: EnvId) -> Result<&ToolEnvironment, ToolError> {
        self.envs.get(&id).ok_or(ToolError::UnknownEnv(id))
    }

    pub fn env_for(&self, owner: &ProgramId, profile: &str) -> Option<&ToolEnvironment> {
        self.by_owner.get(owner).and_then(|ids| {
            ids.iter()
                .filter_map(|id| self.envs.get(id))
                .find(|e| e.profile == profile && e.prep_status != PrepStatus::Released)
        })
    }

    pub fn envs_of(&self, owner: &ProgramId) -> Vec<&ToolEnvironment> {
        self.by_owner
            .get(owner)
            .map(|ids| ids.iter().filter_map(|id| self.envs.get(id)).collect())
            .unwrap_or_default()
    }

    /// Runs one tool invocation: draws a duration and returns the completion
    /// tick. The env must be Ready and owned by the caller.
    pub fn execute_tool(
        &self,
        env_id: EnvId,
        caller: &ProgramId,
        sampler: &LatencySampler,
        rng: &mut impl Rng,
        now: Tick,
    ) -> Result<Tick, ToolError> {
        let env = self.env(env_id)?;
        if &env.owner != caller {
            return Err(ToolError::WrongOwner {
                env: env_id,
                owner: env.owner.clone(),
                caller: caller.clone(),
            });
        }
        match env.prep_status {
            PrepStatus::Ready => Ok(now + sampler.sample(rng)),
            PrepStatus::Preparing { ready_at } => Err(ToolError::EnvNotReady {
                env: env_id,
                ready_at,
            }),
            PrepStatus::Released => Err(ToolError::UnknownEnv(env_id)),
        }
    }

    /// Teardown hook fired on program termination: releases every
    /// environment the program owns and credits the pools. Idempotent — a
    /// second call reclaims zero.
    pub fn release_hooks(
        &mut self,
        program: &ProgramId,
        program_is_stopped: bool,
    ) -> Result<Reclaimed, ToolError> {
        if !program_is_stopped {
            return Err(ToolError::ProgramStillActive(program.clone()));
        }
        if self.fail_release_for.contains(program) {
            // Injected fault: teardown silently skipped, visible to the
            // leak audit.
            return Ok(Reclaimed::default());
        }
        let mut reclaimed = Reclaimed::default();
        if let Some(ids) = self.by_owner.get(program).cloned() {
            for id in ids {
                let env = self.envs.get_mut(&id).expect("indexed env exists");
                if env.prep_status == PrepStatus::Released {
                    continue;
                }
                reclaimed.disk_units += env.disk_units;
                reclaimed.ports += 1;
                self.pools.credit(env.disk_units, env.port);
                env.prep_status = PrepStatus::Released;
                env.disk_units = 0;
            }
        }
        Ok(reclaimed)
    }

    /// Environments whose owner has stopped but which were never released.
    pub fn leak_audit(&self, is_stopped: impl Fn(&ProgramId) -> bool) -> Vec<EnvId> {
        self.envs
            .values()
            .filter(|e| e.prep_status != PrepStatus::Released && is_stopped(&e.owner))
            .map(|e| e.env_id)
            .collect()
    }

    /// Conservation check: pool usage equals the sum over live environments.
    pub fn disk_conserved(&self) -> bool {
        let live: u64 = self
            .envs
            .values()
            .filter(|e| e.prep_status != PrepStatus::Released)
            .map(|e| e.disk_units)
            .sum();
        live == self.pools.disk_used
    }

    pub fn inject_release_failure(&mut self, program: ProgramId) {
        self.fail_release_for.insert(program);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn pid(s: &str) -> ProgramId {
        ProgramId::new(s)
    }

    fn manager(disk: u64, ports: u16) -> ToolManager {
        ToolManager::new(ResourcePools::new(disk, 30000, ports), true)
    }

    #[test]
    fn acquire_allocates_disk_and_port() {
        let mut tm = manager(100, 8);
        let env = tm.acquire_env(&pid("p"), "mini", 10, 30, 0).unwrap();
        assert_eq!(tm.pools.disk_used, 10);
        assert_eq!(tm.pools.ports_free(), 7);
        assert_eq!(
            tm.env(env).unwrap().prep_status,
            PrepStatus::Preparing { ready_at: 30 }
        );
    }

    #[test]
    fn ports_exhaust_before_disk() {
        let mut tm = manager(1000, 2);
        tm.acquire_env(&pid("a"), "x", 1, 1, 0).unwrap();
        tm.acquire_env(&pid("b"), "x", 1, 1, 0).unwrap();
        assert_eq!(
            tm.acquire_env(&pid("c"), "x", 1, 1, 0).unwrap_err(),
            ToolError::PortsExhausted
        );
    }

    #[test]
    fn disk_exhausts_at_pool_arithmetic_boundary() {
        let per = 10u64;
        let capacity = 95u64;
        let mut tm = manager(capacity, 64);
        let fit = (capacity / per) as usize;
        for i in 0..fit {
            tm.acquire_env(&pid(&format!("p{i}")), "x", per, 1, 0)
                .unwrap();
        }
        // The ⌈capacity/disk⌉ + 1-th call fails.
        let err = tm.acquire_env(&pid("overflow"), "x", per, 1, 0).unwrap_err();
        assert_eq!(
            err,
            ToolError::DiskExhausted {
                needed: per,
                available: capacity - per * fit as u64
            }
        );
    }

    #[test]
    fn prep_clock_flips_to_ready() {
        let mut tm = manager(100, 8);
        let env = tm.acquire_env(&pid("p"), "x", 1, 5, 10).unwrap();
        assert!(tm.tick(14).is_empty());
        assert_eq!(tm.tick(15), vec![env]);
        assert_eq!(tm.env(env).unwrap().prep_status, PrepStatus::Ready);
    }

    #[test]
    fn prepare_async_is_idempotent_signal() {
        let mut tm = manager(100, 8);
        tm.prepare_async(&pid("p"), "x", 1, 5, 0).unwrap();
        assert_eq!(
            tm.prepare_async(&pid("p"), "x", 1, 5, 1).unwrap_err(),
            ToolError::AlreadyPreparing(pid("p"))
        );
        assert_eq!(tm.envs_of(&pid("p")).len(), 1);
    }

    #[test]
    fn execute_requires_ready_and_owner() {
        let mut tm = manager(100, 8);
        let env = tm.acquire_env(&pid("p"), "x", 1, 5, 0).unwrap();
        let sampler = LatencySampler::Deterministic { ticks: 12 };
        let mut rng = StdRng::seed_from_u64(1);
        assert_eq!(
            tm.execute_tool(env, &pid("p"), &sampler, &mut rng, 2),
            Err(ToolError::EnvNotReady { env, ready_at: 5 })
        );
        tm.tick(5);
        assert_eq!(
            tm.execute_tool(env, &pid("q"), &sampler, &mut rng, 6),
            Err(ToolError::WrongOwner {
                env,
                owner: pid("p"),
                caller: pid("q")
            })
        );
        // Deterministic(12) completes exactly 12 ticks later.
        assert_eq!(
            tm.execute_tool(env, &pid("p"), &sampler, &mut rng, 6).unwrap(),
            18
        );
    }

    #[test]
    fn release_hooks_reclaim_everything_once() {
        let mut tm = manager(100, 8);
        tm.acquire_env(&pid("p"), "a", 10, 1, 0).unwrap();
        tm.acquire_env(&pid("p"), "b", 5, 1, 0).unwrap();
        assert_eq!(
            tm.release_hooks(&pid("p"), false).unwrap_err(),
            ToolError::ProgramStillActive(pid("p"))
        );
        let first = tm.release_hooks(&pid("p"), true).unwrap();
        assert_eq!(
            first,
            Reclaimed {
                disk_units: 15,
                ports: 2
            }
        );
        assert_eq!(tm.pools.disk_used, 0);
        assert_eq!(tm.pools.ports_free(), 8);
        let second = tm.release_hooks(&pid("p"), true).unwrap();
        assert_eq!(second, Reclaimed::default());
    }

    #[test]
    fn leak_audit_finds_unreleased_orphans() {
        let mut tm = manager(100, 8);
        tm.acquire_env(&pid("done"), "x", 10, 1, 0).unwrap();
        tm.acquire_env(&pid("live"), "x", 10, 1, 0).unwrap();
        let stopped = |id: &ProgramId| id == &pid("done");
        assert_eq!(tm.leak_audit(stopped).len(), 1);
        tm.release_hooks(&pid("done"), true).unwrap();
        assert!(tm.leak_audit(stopped).is_empty());
    }

    #[test]
    fn injected_release_failure_is_audited() {
        let mut tm = manager(100, 8);
        tm.acquire_env(&pid("p"), "x", 10, 1, 0).unwrap();
        tm.inject_release_failure(pid("p"));
        tm.release_hooks(&pid("p"), true).unwrap();
        let orphans = tm.leak_audit(|_| true);
        assert_eq!(orphans.len(), 1);
    }

    #[test]
    fn port_uniqueness_under_random_interleaving() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut tm = manager(10_000, 32);
        let mut live: Vec<ProgramId> = Vec::new();
        for i in 0..400 {
            if !live.is_empty() && rng.gen_bool(0.4) {
                let idx = rng.gen_range(0..live.len());
                let victim = live.swap_remove(idx);
                tm.release_hooks(&victim, true).unwrap();
            } else {
                let owner = pid(&format!("p{i}"));
                if tm
                    .acquire_env(&owner, "x", rng.gen_range(1..20), 1, i as Tick)
                    .is_ok()
                {
                    live.push(owner);
                }
            }
            // No two live environments share a port.
            let mut ports = BTreeSet::new();
            for env in tm.envs.values() {
                if env.prep_status != PrepStatus::Released {
                    assert!(ports.insert(env.port), "duplicate port {}", env.port);
                }
            }
            assert!(tm.disk_conserved());
        }
    }

    #[test]
    fn exponential_discretization_is_memoryless() {
        let sampler = LatencySampler::Exponential { mean: 20.0 };
        let mut rng = StdRng::seed_from_u64(77);
        let n = 100_000;
        let draws: Vec<u64> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
        let survive = |k: u64| draws.iter().filter(|&&d| d > k).count() as f64 / n as f64;
        let (a, b) = (10u64, 15u64);
        let p_ab = survive(a + b);
        let p_a = survive(a);
        let p_b = survive(b);
        // P(T > a+b | T > a) should match P(T > b) within 2% absolute.
        assert!(p_a > 0.0);
        assert!(
            (p_ab / p_a - p_b).abs() < 0.02,
            "memorylessness violated: {} vs {}",
            p_ab / p_a,
            p_b
        );
        assert!(draws.iter().all(|&d| d >= 1));
    }

    #[test]
    fn heavy_tailed_quantiles_match_configuration() {
        let sampler = LatencySampler::HeavyTailed {
            p50: 2,
            p95: 30,
            p99: 120,
            cap: 600,
        };
        sampler.validate().unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let n = 100_000;
        let mut draws: Vec<u64> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
        draws.sort_unstable();
        let q = |frac: f64| draws[((n as f64 * frac) as usize).min(n - 1)];
        let within = |observed: u64, target: u64| {
            (observed as f64 - target as f64).abs() <= 0.10 * target as f64
        };
        assert!(within(q(0.50), 2), "p50 observed {}", q(0.50));
        assert!(within(q(0.95), 30), "p95 observed {}", q(0.95));
        assert!(within(q(0.99), 120), "p99 observed {}", q(0.99));
        assert!(draws.iter().all(|&d| d >= 1 && d <= 600));
    }

    #[test]
    fn sampler_validation() {
        assert!(LatencySampler::Deterministic { ticks: 0 }.validate().is_err());
        assert!(LatencySampler::Exponential { mean: 0.0 }.validate().is_err());
        assert!(LatencySampler::HeavyTailed {
            p50: 10,
            p95: 5,
            p99: 50,
            cap: 100
        }
        .validate()
        .is_err());
    }
}
