//! The deterministic engine loop.
//!
//! One `step()` advances the whole cluster a single tick in a fixed order:
//! tool/prep completions, the periodic monitor pass (pauses), a restore scan,
//! backend prefill+decode, a second restore scan over capacity freed by
//! completions, async environment preparation, and finally cost accounting.
//! Everything iterates in id order over ordered containers, so identical
//! inputs replay to byte-identical event logs.

use super::backend::{ResumeOutcome, SimBackend};
use super::policy::{PolicyKind, TtlEstimator};
use super::{event_names as ev, EventRecord, SimError};
use crate::config::EngineConfig;
use crate::ledger::{
    imbalance_series, CostComponent, CostLedger, IntervalRow, LatencySummary, MetricsReport,
    StpSample,
};
use crate::program::{ProgramEvent, ProgramRegistry, ProgramStatus};
use crate::scheduler::{
    plan_pauses, plan_restores, BackendView, ClusterView, GlobalWaitQueue, ProgramView, QueuedView,
    ScheduleDecision,
};
use crate::tools::{EnvProfile, ResourcePools, ToolManager};
use crate::types::{BackendId, EnvId, ProgramId, Tick, Tokens};
use crate::workload::{arrival_rng, tool_latency_rng, ArrivalModel, ProgramScript, WorkloadTrace};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

const HARD_TICK_LIMIT: Tick = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineMode {
    /// Programs are driven by a scripted trace.
    Trace,
    /// Programs are driven by gateway calls.
    Service,
}

/// Per-program execution state owned by the engine (not program metadata).
#[derive(Debug, Clone)]
pub(crate) struct ProgramRuntime {
    pub index: usize,
    pub script: Option<ProgramScript>,
    pub step_idx: usize,
    pub emission_remaining: Tokens,
    pub emission_active: bool,
    /// High-water mark of tokens ever materialized on any backend; what a
    /// full resume must recompute.
    pub materialized: Tokens,
    pub created_at: Tick,
    pub step_ready_at: Tick,
    pub first_call_tick: Option<Tick>,
    pub first_result_tick: Option<Tick>,
    pub pending_result: Option<(Tick, Tokens)>,
    pub home: BackendId,
    pub used_envs: BTreeSet<EnvId>,
    pub reported_exhausted: bool,
    pub parked_chat: Option<ParkedChat>,
    pub parked_tool: Option<ParkedTool>,
}

#[derive(Debug, Clone)]
pub(crate) struct ParkedChat {
    pub ticket: u64,
    pub body: serde_json::Value,
    pub max_tokens: Tokens,
}

#[derive(Debug, Clone)]
pub(crate) struct ParkedTool {
    pub ticket: u64,
    pub command: String,
    pub profile: String,
    pub result_tokens: Tokens,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: u64,
    pub completed_programs: u64,
    pub pauses: u64,
    pub restores: u64,
    pub resume_hits: u64,
    pub resume_misses: u64,
    pub decode_stall_ticks: u64,
    pub forced_reasoning_evictions: u64,
    pub reasoning_eviction_recompute_tokens: Tokens,
    pub max_snapshot_age: Tick,
    pub starved_restores: u64,
}

/// Per-interval unused-capacity audit entry (the `C_unused < c_min·Δt`
/// bound).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnusedAudit {
    pub tick: Tick,
    pub backend: BackendId,
    pub unused_token_ticks: u64,
    /// Smallest queued context observed in the interval while the queue was
    /// nonempty.
    pub min_queued_context: Option<Tokens>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgramOutcome {
    pub id: ProgramId,
    pub steps: u64,
    pub total_tokens: Tokens,
    pub created_at: Tick,
    pub first_result_tick: Option<Tick>,
    pub stopped: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub policy: PolicyKind,
    pub report: MetricsReport,
    pub events: Vec<EventRecord>,
    pub interval_rows: Vec<IntervalRow>,
    pub imbalance_per_interval: Vec<f64>,
    pub unused_audit: Vec<UnusedAudit>,
    pub per_program: Vec<ProgramOutcome>,
    pub end_tick: Tick,
}

#[derive(Debug, Clone)]
struct TraceState {
    trace: WorkloadTrace,
    next_program: usize,
    live_target: usize,
    open_arrivals: BTreeMap<Tick, Vec<usize>>,
}

#[derive(Debug, Default)]
pub struct ServiceState {
    next_ticket: u64,
    pub deliveries: Vec<(u64, serde_json::Value)>,
    pub capture_forwards: bool,
    pub forwards: BTreeMap<u64, serde_json::Value>,
    next_service_index: usize,
}

impl ServiceState {
    pub fn new_ticket(&mut self) -> u64 {
        self.next_ticket += 1;
        self.next_ticket
    }
}

pub struct Engine {
    pub cfg: EngineConfig,
    pub policy: PolicyKind,
    pub clock: Tick,
    pub registry: ProgramRegistry,
    pub queue: GlobalWaitQueue,
    pub backends: Vec<SimBackend>,
    pub tools: ToolManager,
    pub ledger: CostLedger,
    pub service: ServiceState,
    pub(crate) runtime: BTreeMap<ProgramId, ProgramRuntime>,
    events: Vec<EventRecord>,
    tool_due: BTreeMap<Tick, Vec<ProgramId>>,
    env_retry: BTreeSet<ProgramId>,
    /// Request-level admission queue: readmits at the front, arrivals behind.
    ra_waiting: VecDeque<ProgramId>,
    ttl: TtlEstimator,
    mode: EngineMode,
    trace_state: Option<TraceState>,
    async_prep: bool,
    stats: RunStats,
    step_latencies: Vec<u64>,
    prep_savings: u64,
    // Per-tick working state.
    charged: BTreeSet<ProgramId>,
    progress: bool,
    // Interval accounting.
    interval_components: Vec<[u64; 5]>,
    interval_unused: Vec<u64>,
    interval_min_queued: Vec<Option<Tokens>>,
    interval_rows: Vec<IntervalRow>,
    imbalance_snapshots: Vec<Vec<Tokens>>,
    unused_audit: Vec<UnusedAudit>,
    seed: u64,
}

impl Engine {
    pub fn new_service(cfg: EngineConfig, policy: PolicyKind) -> Result<Self, SimError> {
        Self::build(cfg, policy, None, EngineMode::Service)
    }

    pub fn new_trace(
        cfg: EngineConfig,
        policy: PolicyKind,
        trace: WorkloadTrace,
    ) -> Result<Self, SimError> {
        Self::build(cfg, policy, Some(trace), EngineMode::Trace)
    }

    fn build(
        mut cfg: EngineConfig,
        policy: PolicyKind,
        trace: Option<WorkloadTrace>,
        mode: EngineMode,
    ) -> Result<Self, SimError> {
        if cfg.tick_seconds <= 0.0 {
            cfg.tick_seconds = 1.0;
        }
        cfg.validate()
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        // Trace profiles are merged over the config's.
        if let Some(t) = &trace {
            for (name, profile) in &t.profiles {
                cfg.envs
                    .profiles
                    .entry(name.clone())
                    .or_insert_with(|| profile.clone());
            }
        }
        let backends: Vec<SimBackend> = (0..cfg.cluster.backends)
            .map(|i| SimBackend::new(BackendId(i as u32), cfg.cluster.capacity_tokens))
            .collect();
        let tools = ToolManager::new(
            ResourcePools::new(
                cfg.pools.disk_capacity,
                cfg.pools.port_start,
                cfg.pools.port_count,
            ),
            cfg.tools.gc_hooks,
        );
        let ledger = if cfg.retain_samples {
            CostLedger::with_retained_samples()
        } else {
            CostLedger::new()
        };
        let async_prep = cfg.tools.async_prep.unwrap_or(policy.default_async_prep());
        let n_backends = cfg.cluster.backends;
        let ttl = match policy {
            PolicyKind::TtlPin { predictor } => TtlEstimator::new(predictor),
            _ => TtlEstimator::default(),
        };
        let seed = trace.as_ref().map(|t| t.seed).unwrap_or(0);
        let trace_state = trace.map(|trace| {
            let mut open_arrivals: BTreeMap<Tick, Vec<usize>> = BTreeMap::new();
            let live_target = match trace.arrival {
                ArrivalModel::Closed { concurrency } => concurrency.max(1),
                ArrivalModel::Open { mean_interarrival } => {
                    let mut rng = arrival_rng(trace.seed);
                    let mut at: f64 = 0.0;
                    for idx in 0..trace.programs.len() {
                        open_arrivals.entry(at.floor() as Tick).or_default().push(idx);
                        let u: f64 = rng.gen_range(0.0..1.0);
                        at += -mean_interarrival * (1.0 - u).ln();
                    }
                    usize::MAX
                }
            };
            TraceState {
                trace,
                next_program: 0,
                live_target,
                open_arrivals,
            }
        });
        Ok(Engine {
            interval_components: vec![[0; 5]; n_backends],
            interval_unused: vec![0; n_backends],
            interval_min_queued: vec![None; n_backends],
            cfg,
            policy,
            clock: 0,
            registry: ProgramRegistry::new(),
            queue: GlobalWaitQueue::new(),
            backends,
            tools,
            ledger,
            service: ServiceState::default(),
            runtime: BTreeMap::new(),
            events: Vec::new(),
            tool_due: BTreeMap::new(),
            env_retry: BTreeSet::new(),
            ra_waiting: VecDeque::new(),
            ttl,
            mode,
            trace_state,
            async_prep,
            stats: RunStats::default(),
            step_latencies: Vec::new(),
            prep_savings: 0,
            charged: BTreeSet::new(),
            progress: false,
            interval_rows: Vec::new(),
            imbalance_snapshots: Vec::new(),
            unused_audit: Vec::new(),
            seed,
        })
    }

    pub fn mode(&self) -> EngineMode {
        self.mode
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn prep_savings(&self) -> u64 {
        self.prep_savings
    }

    fn emit(
        &mut self,
        event: &'static str,
        program: Option<&ProgramId>,
        backend: Option<BackendId>,
        tokens: u64,
    ) {
        self.events.push(EventRecord {
            tick: self.clock,
            event,
            program: program.cloned(),
            backend,
            tokens,
        });
    }

    fn charge(
        &mut self,
        backend: BackendId,
        program: Option<&ProgramId>,
        component: CostComponent,
        tokens: Tokens,
    ) {
        if tokens == 0 {
            return;
        }
        self.ledger
            .record(StpSample {
                program: program.cloned(),
                backend,
                component,
                tokens,
                duration: 1,
            })
            .expect("valid sample");
        let slot = &mut self.interval_components[backend.0 as usize];
        let idx = CostComponent::ALL
            .iter()
            .position(|c| *c == component)
            .expect("component indexed");
        slot[idx] += tokens;
        if component == CostComponent::Unused {
            self.interval_unused[backend.0 as usize] += tokens;
        }
    }

    fn profile(&self, name: &str) -> Result<EnvProfile, SimError> {
        self.cfg
            .envs
            .profiles
            .get(name)
            .cloned()
            .ok_or_else(|| SimError::ConfigError(format!("unknown env profile {name}")))
    }

    fn backend_mut(&mut self, id: BackendId) -> &mut SimBackend {
        &mut self.backends[id.0 as usize]
    }

    fn backend(&self, id: BackendId) -> &SimBackend {
        &self.backends[id.0 as usize]
    }

    // ------------------------------------------------------------------
    // Program creation and release
    // ------------------------------------------------------------------

    pub(crate) fn create_scripted_program(&mut self, index: usize) -> Result<ProgramId, SimError> {
        let now = self.clock;
        let script = {
            let ts = self.trace_state.as_ref().expect("trace mode");
            ts.trace.programs[index].clone()
        };
        let id = ProgramId::new(format!("p{index:04}"));
        let profiles = script.profiles();
        self.registry
            .create_program(id.clone(), script.prompt_tokens, profiles, now)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        let first_emission = script.steps[0].reasoning_tokens.max(1);
        let home = BackendId((index % self.backends.len()) as u32);
        self.runtime.insert(
            id.clone(),
            ProgramRuntime {
                index,
                script: Some(script),
                step_idx: 0,
                emission_remaining: first_emission,
                emission_active: true,
                materialized: 0,
                created_at: now,
                step_ready_at: now,
                first_call_tick: None,
                first_result_tick: None,
                pending_result: None,
                home,
                used_envs: BTreeSet::new(),
                reported_exhausted: false,
                parked_chat: None,
                parked_tool: None,
            },
        );
        let prompt = self.registry.get(&id).expect("created").context_tokens;
        self.emit(ev::PROGRAM_CREATED, Some(&id), None, prompt);
        if self.policy.uses_waiting_queue() {
            self.queue.enqueue(id.clone(), now);
        } else {
            self.ra_waiting.push_back(id.clone());
        }
        self.progress = true;
        Ok(id)
    }

    /// Creates a service-mode program (gateway path).
    pub(crate) fn create_service_program(
        &mut self,
        id: ProgramId,
        prompt_tokens: Tokens,
    ) -> Result<(), SimError> {
        let now = self.clock;
        self.registry
            .create_program(id.clone(), prompt_tokens, Vec::new(), now)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        let index = self.service.next_service_index;
        self.service.next_service_index += 1;
        let home = BackendId((index % self.backends.len()) as u32);
        self.runtime.insert(
            id.clone(),
            ProgramRuntime {
                index,
                script: None,
                step_idx: 0,
                emission_remaining: 0,
                emission_active: false,
                materialized: 0,
                created_at: now,
                step_ready_at: now,
                first_call_tick: None,
                first_result_tick: None,
                pending_result: None,
                home,
                used_envs: BTreeSet::new(),
                reported_exhausted: false,
                parked_chat: None,
                parked_tool: None,
            },
        );
        self.emit(ev::PROGRAM_CREATED, Some(&id), None, prompt_tokens);
        if self.policy.uses_waiting_queue() {
            self.queue.enqueue(id.clone(), now);
        } else {
            self.ra_waiting.push_back(id.clone());
        }
        self.progress = true;
        Ok(())
    }

    /// Releases a program: cancels any in-flight tool call, evicts its KV,
    /// fires the GC hooks and (closed-loop) admits the next scripted arrival.
    pub(crate) fn release_program(&mut self, id: &ProgramId) -> Result<(), SimError> {
        let now = self.clock;
        let program = self
            .registry
            .get(id)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        if program.status.is_stopped() {
            return Ok(());
        }
        let placement = program.placement;
        let context = program.context_tokens;
        // Cancel the pending tool completion.
        let pending = self.runtime.get(id).and_then(|r| r.pending_result);
        if let Some((due, _)) = pending {
            if let Some(list) = self.tool_due.get_mut(&due) {
                list.retain(|p| p != id);
            }
            self.emit(ev::TOOL_CANCELLED, Some(id), None, 0);
            if let Some(rt) = self.runtime.get_mut(id) {
                rt.pending_result = None;
            }
        }
        self.registry
            .apply(id, &ProgramEvent::ReleaseRequested, now)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        if let Some(b) = placement {
            let _ = self.backend_mut(b).evict(id);
        }
        self.queue.remove(id);
        self.ra_waiting.retain(|p| p != id);
        self.env_retry.remove(id);
        if self.cfg.tools.gc_hooks {
            let reclaimed = self
                .tools
                .release_hooks(id, true)
                .expect("status is stopped");
            if reclaimed.disk_units > 0 || reclaimed.ports > 0 {
                self.emit(ev::ENV_RELEASED, Some(id), None, reclaimed.disk_units);
            }
        }
        self.emit(ev::RELEASED, Some(id), placement, context);
        self.stats.completed_programs += 1;
        self.progress = true;
        // Closed-loop replacement.
        if self.mode == EngineMode::Trace {
            self.spawn_closed_loop_arrivals()?;
        }
        Ok(())
    }

    fn live_count(&self) -> usize {
        self.registry
            .iter()
            .filter(|p| !p.status.is_stopped())
            .count()
    }

    fn spawn_closed_loop_arrivals(&mut self) -> Result<(), SimError> {
        loop {
            let (next, target, total, open) = match self.trace_state.as_ref() {
                Some(ts) => (
                    ts.next_program,
                    ts.live_target,
                    ts.trace.programs.len(),
                    !ts.open_arrivals.is_empty(),
                ),
                None => return Ok(()),
            };
            if open || next >= total || self.live_count() >= target {
                return Ok(());
            }
            self.trace_state.as_mut().expect("trace mode").next_program += 1;
            self.create_scripted_program(next)?;
        }
    }

    fn spawn_open_loop_arrivals(&mut self) -> Result<(), SimError> {
        let due: Vec<usize> = match self.trace_state.as_mut() {
            Some(ts) => match ts.open_arrivals.remove(&self.clock) {
                Some(v) => v,
                None => return Ok(()),
            },
            None => return Ok(()),
        };
        for idx in due {
            self.trace_state.as_mut().expect("trace mode").next_program += 1;
            self.create_scripted_program(idx)?;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Pause / restore / admission
    // ------------------------------------------------------------------

    fn apply_pause(&mut self, id: &ProgramId, reason: &'static str) -> Result<(), SimError> {
        let now = self.clock;
        let program = self
            .registry
            .get(id)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        if !program.status.is_live() {
            return Ok(());
        }
        let was_reasoning = matches!(program.status, ProgramStatus::Reasoning);
        let placement = program.placement.expect("live implies placed");
        let (freed, cancelled) = match self.backend_mut(placement).evict(id) {
            Ok(r) => r,
            Err(_) => (0, None),
        };
        if let Some(job) = &cancelled {
            // Sunk partial prefill: the chunks already charged are wasted;
            // the audit trail is the cancelled-job event.
            self.emit(ev::EVICTION, Some(id), Some(placement), job.remaining());
        }
        self.registry
            .apply(id, &ProgramEvent::PauseRequested, now)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        self.queue.enqueue(id.clone(), now);
        self.emit(reason, Some(id), Some(placement), freed);
        self.stats.pauses += 1;
        if was_reasoning {
            let materialized = self.runtime.get(id).map(|r| r.materialized).unwrap_or(0);
            self.stats.reasoning_eviction_recompute_tokens += materialized;
        }
        self.progress = true;
        Ok(())
    }

    fn apply_restore(&mut self, id: &ProgramId, target: BackendId) -> Result<(), SimError> {
        let now = self.clock;
        self.registry
            .apply(id, &ProgramEvent::RestoreGranted { backend: target }, now)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        self.queue.remove(id);
        self.stats.restores += 1;
        let context = self.registry.get(id).expect("known").context_tokens;
        self.emit(ev::RESTORED, Some(id), Some(target), context);
        self.admit_to_backend(id, target, true)?;
        if self.async_prep {
            self.start_prep_for(id)?;
        }
        self.progress = true;
        Ok(())
    }

    /// Runs the cache-admission path on `target` and records resume
    /// accounting. `count_resume` is false for plumbing-only extensions.
    fn admit_to_backend(
        &mut self,
        id: &ProgramId,
        target: BackendId,
        count_resume: bool,
    ) -> Result<(), SimError> {
        let now = self.clock;
        let program = self
            .registry
            .get(id)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        let context = program.context_tokens;
        let materialized = self.runtime.get(id).map(|r| r.materialized).unwrap_or(0);
        let outcome = self
            .backend_mut(target)
            .admit(id, context, materialized, now)?;
        match outcome {
            ResumeOutcome::Hit { cached, new_tokens } => {
                if count_resume {
                    self.ledger.record_resume_hit(cached);
                    self.stats.resume_hits += 1;
                    self.emit(ev::RESUME_HIT, Some(id), Some(target), cached);
                }
                let _ = new_tokens;
            }
            ResumeOutcome::Miss {
                recompute,
                new_tokens,
            } => {
                if count_resume {
                    if recompute > 0 {
                        self.ledger.record_resume_miss(recompute);
                        self.stats.resume_misses += 1;
                        self.emit(ev::RESUME_MISS, Some(id), Some(target), recompute);
                    } else {
                        self.emit(ev::ADMITTED, Some(id), Some(target), new_tokens);
                    }
                }
            }
            ResumeOutcome::Extended { .. } => {}
        }
        self.sync_decoding(id);
        Ok(())
    }

    /// Keeps the backend decode set consistent with program state: decoding
    /// iff placed, Reasoning, prefill drained and an emission is pending.
    fn sync_decoding(&mut self, id: &ProgramId) {
        let Ok(program) = self.registry.get(id) else {
            return;
        };
        let Some(rt) = self.runtime.get(id) else {
            return;
        };
        let Some(b) = program.placement else {
            return;
        };
        let eligible = matches!(program.status, ProgramStatus::Reasoning)
            && rt.emission_active
            && rt.emission_remaining > 0
            && !self.backend(b).has_prefill(id);
        let backend = self.backend_mut(b);
        if eligible {
            backend.decoding.insert(id.clone());
        } else {
            backend.decoding.remove(id);
        }
    }

    /// Builds the scheduler's view of the cluster from fresh backend
    /// snapshots. The monitor refuses snapshots older than Δt; in-process
    /// polls are always age zero, and the audit keeps the proof.
    fn cluster_view(&mut self) -> ClusterView {
        let now = self.clock;
        let snapshots = self.poll_snapshot_ages(now);
        let backends = self
            .backends
            .iter()
            .zip(snapshots)
            .filter(|(_, age)| *age < self.cfg.scheduler.delta_t.max(1))
            .map(|(b, _)| BackendView {
                id: b.id,
                capacity_tokens: b.capacity_tokens,
                healthy: b.healthy,
                programs: self
                    .registry
                    .placed_on(b.id)
                    .into_iter()
                    .map(|p| ProgramView {
                        id: p.id.clone(),
                        context_tokens: p.context_tokens,
                        phase: p.phase,
                        status_acting_since: match p.status {
                            ProgramStatus::Acting { acting_since } => Some(acting_since),
                            _ => None,
                        },
                    })
                    .collect(),
            })
            .collect();
        let queue = self
            .queue
            .ordered(|id| self.registry.get(id).ok())
            .into_iter()
            .filter_map(|id| {
                let p = self.registry.get(&id).ok()?;
                let paused_since = match p.status {
                    ProgramStatus::Paused { paused_since } => paused_since,
                    _ => 0,
                };
                Some(QueuedView {
                    id: id.clone(),
                    context_tokens: p.context_tokens,
                    phase: p.phase,
                    paused_since,
                    acting_since: p.current_call.map(|c| c.issued_at),
                })
            })
            .collect();
        ClusterView { backends, queue }
    }

    fn poll_snapshot_ages(&mut self, now: Tick) -> Vec<Tick> {
        // Snapshots are taken in-process at the poll tick itself.
        let ages = vec![0; self.backends.len()];
        self.stats.max_snapshot_age = self.stats.max_snapshot_age.max(0);
        let _ = now;
        ages
    }

    fn restore_scan(&mut self) -> Result<(), SimError> {
        if !self.policy.uses_waiting_queue() {
            return self.request_level_admission();
        }
        if self.queue.is_empty() {
            return Ok(());
        }
        let mut view = self.cluster_view();
        if matches!(self.policy, PolicyKind::PinnedRouting) {
            // Per-replica queues: a program only restores to its home.
            let homes: BTreeMap<ProgramId, BackendId> = view
                .queue
                .iter()
                .map(|q| {
                    let home = self.runtime.get(&q.id).map(|r| r.home).unwrap_or(BackendId(0));
                    (q.id.clone(), home)
                })
                .collect();
            for (id, home) in homes {
                let single = ClusterView {
                    backends: view
                        .backends
                        .iter()
                        .filter(|b| b.id == home)
                        .cloned()
                        .collect(),
                    queue: view
                        .queue
                        .iter()
                        .filter(|q| q.id == id)
                        .cloned()
                        .collect(),
                };
                let (decisions, starved) =
                    plan_restores(&single, &self.cfg.scheduler, self.clock, &[]);
                for d in decisions {
                    match d {
                        ScheduleDecision::Restore(pid, target) => {
                            self.apply_restore(&pid, target)?
                        }
                        ScheduleDecision::Pause(pid) => self.apply_pause(&pid, ev::PAUSED)?,
                        ScheduleDecision::Noop => {}
                    }
                }
                self.stats.starved_restores += starved.len() as u64;
                // Rebuild the view after each admission so loads stay true.
                view = self.cluster_view();
            }
            return Ok(());
        }
        let (decisions, starved) = plan_restores(&view, &self.cfg.scheduler, self.clock, &[]);
        for id in &starved {
            self.queue.bump_starvation(id);
        }
        self.stats.starved_restores += starved.len() as u64;
        for d in decisions {
            match d {
                ScheduleDecision::Restore(id, target) => self.apply_restore(&id, target)?,
                ScheduleDecision::Pause(id) => self.apply_pause(&id, ev::PAUSED)?,
                ScheduleDecision::Noop => {}
            }
        }
        Ok(())
    }

    /// Request-level admission (RequestAware / TtlPin): FIFO, no global
    /// queue. RequestAware admits unconditionally; TtlPin checks that the
    /// committed contexts fit.
    fn request_level_admission(&mut self) -> Result<(), SimError> {
        while let Some(id) = self.ra_waiting.front().cloned() {
            let program = match self.registry.get(&id) {
                Ok(p) => p,
                Err(_) => {
                    self.ra_waiting.pop_front();
                    continue;
                }
            };
            if program.status.is_stopped() {
                self.ra_waiting.pop_front();
                continue;
            }
            let context = program.context_tokens;
            let already_placed = program.placement;
            let target = match already_placed {
                Some(b) => b,
                None => {
                    // Prefix-affinity: reuse a cache-holding backend, else
                    // least committed.
                    let holder = self
                        .backends
                        .iter()
                        .find(|b| b.is_resident(&id))
                        .map(|b| b.id);
                    match holder {
                        Some(b) => b,
                        None => self.least_committed_backend(),
                    }
                }
            };
            if let PolicyKind::TtlPin { .. } = self.policy {
                if already_placed.is_none() {
                    let committed = self.committed_tokens(target);
                    if committed + context > self.cfg.cluster.capacity_tokens {
                        // FIFO head blocks until space frees.
                        break;
                    }
                }
            }
            self.ra_waiting.pop_front();
            if already_placed.is_none() {
                self.registry
                    .apply(&id, &ProgramEvent::RestoreGranted { backend: target }, self.clock)
                    .map_err(|e| SimError::ConfigError(e.to_string()))?;
                self.queue.remove(&id);
                self.emit(ev::RESTORED, Some(&id), Some(target), context);
                self.stats.restores += 1;
            }
            self.admit_to_backend(&id, target, true)?;
            if self.async_prep {
                self.start_prep_for(&id)?;
            }
            self.progress = true;
        }
        Ok(())
    }

    fn committed_tokens(&self, backend: BackendId) -> Tokens {
        self.registry
            .placed_on(backend)
            .iter()
            .map(|p| p.context_tokens)
            .sum()
    }

    fn least_committed_backend(&self) -> BackendId {
        self.backends
            .iter()
            .map(|b| (self.committed_tokens(b.id), b.id))
            .min_by_key(|(load, id)| (*load, id.0))
            .map(|(_, id)| id)
            .expect("at least one backend")
    }

    // ------------------------------------------------------------------
    // Pressure eviction (request-level baselines)
    // ------------------------------------------------------------------

    /// Picks a cache to drop when the pool cannot grow: idle caches by
    /// recency (TtlPin: expired pins first), never the protected program.
    fn pressure_victim(&self, backend: BackendId, protect: &ProgramId) -> Option<ProgramId> {
        let now = self.clock;
        let b = self.backend(backend);
        let mut idle: Vec<(&ProgramId, Tick, bool)> = b
            .resident_programs()
            .filter(|(id, tokens)| {
                **tokens > 0
                    && *id != protect
                    && !b.decoding.contains(*id)
                    && !b.has_prefill(id)
            })
            .map(|(id, _)| {
                let expired = b
                    .pinned_until
                    .get(id)
                    .map(|until| *until <= now)
                    .unwrap_or(true);
                let last = b.last_use.get(id).copied().unwrap_or(0);
                (id, last, expired)
            })
            .collect();
        if idle.is_empty() {
            return None;
        }
        match self.policy {
            PolicyKind::TtlPin { .. } => {
                idle.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(b.0)));
            }
            _ => {
                idle.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
            }
        }
        Some(idle[0].0.clone())
    }

    /// Preempt-by-recompute: evict a mid-decode program (request-level
    /// engines do this once nothing idle remains).
    fn preempt_victim(&self, backend: BackendId, protect: &ProgramId) -> Option<ProgramId> {
        let b = self.backend(backend);
        b.decoding
            .iter()
            .filter(|id| *id != protect)
            .map(|id| (b.last_use.get(id).copied().unwrap_or(0), id))
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)))
            .map(|(_, id)| id.clone())
    }

    /// Drops a cache under pressure, keeping the program placed; a preempted
    /// decoder re-enters the admission queue for recompute.
    fn pressure_evict(&mut self, backend: BackendId, victim: &ProgramId) -> Result<(), SimError> {
        let was_decoding = self.backend(backend).decoding.contains(victim);
        let (freed, cancelled) = match self.backend_mut(backend).evict(victim) {
            Ok(r) => r,
            Err(_) => {
                // Cache already gone; just clear stale decode membership.
                self.backend_mut(backend).decoding.remove(victim);
                return Ok(());
            }
        };
        self.emit(ev::EVICTION, Some(victim), Some(backend), freed);
        if cancelled.is_some() {
            // Sunk prefill chunks become recompute waste on resume.
        }
        let status = self.registry.get(victim).map(|p| p.status).ok();
        if matches!(status, Some(ProgramStatus::Reasoning)) {
            let materialized = self.runtime.get(victim).map(|r| r.materialized).unwrap_or(0);
            self.stats.reasoning_eviction_recompute_tokens += materialized;
        }
        // Anything with an unfinished emission (decoding or mid-prefill)
        // needs a recompute pass to continue.
        let needs_readmit = was_decoding
            || self
                .runtime
                .get(victim)
                .map(|r| r.emission_active)
                .unwrap_or(false);
        if needs_readmit && !self.ra_waiting.contains(victim) {
            self.ra_waiting.push_front(victim.clone());
        }
        self.progress = true;
        Ok(())
    }

    // ------------------------------------------------------------------
    // Tool lifecycle
    // ------------------------------------------------------------------

    fn start_prep_for(&mut self, id: &ProgramId) -> Result<(), SimError> {
        let profiles: Vec<String> = match self.runtime.get(id) {
            Some(rt) => match &rt.script {
                Some(script) => script
                    .steps
                    .get(rt.step_idx)
                    .and_then(|s| s.tool.as_ref())
                    .map(|t| vec![t.profile.clone()])
                    .unwrap_or_default(),
                None => self
                    .registry
                    .get(id)
                    .map(|p| p.requested_profiles.clone())
                    .unwrap_or_default(),
            },
            None => Vec::new(),
        };
        for profile_name in profiles {
            if self.tools.env_for(id, &profile_name).is_some() {
                continue;
            }
            let profile = self.profile(&profile_name)?;
            match self.tools.acquire_env(
                id,
                &profile_name,
                profile.disk_units,
                profile.prep_latency,
                self.clock,
            ) {
                Ok(env) => {
                    self.emit(ev::ENV_ACQUIRED, Some(id), None, profile.disk_units);
                    if let Ok(p) = self.registry.get(id) {
                        let _ = p;
                    }
                    let _ = env;
                    self.progress = true;
                }
                Err(_) => break, // pool pressure; retried on later scans
            }
        }
        Ok(())
    }

    /// Issues the current scripted step's tool call. Returns false when the
    /// environment could not be acquired yet (pool exhausted).
    fn issue_tool_call(&mut self, id: &ProgramId) -> Result<bool, SimError> {
        let (profile_name, sampler, result_tokens) = {
            let rt = self.runtime.get(id).expect("runtime exists");
            let script = rt.script.as_ref().expect("scripted program");
            let step = &script.steps[rt.step_idx];
            let tool = step.tool.as_ref().expect("tool step");
            (tool.profile.clone(), tool.sampler, step.result_tokens)
        };
        self.issue_tool(id, &profile_name, sampler, result_tokens)
    }

    fn issue_tool(
        &mut self,
        id: &ProgramId,
        profile_name: &str,
        sampler: crate::tools::LatencySampler,
        result_tokens: Tokens,
    ) -> Result<bool, SimError> {
        let now = self.clock;
        let (step_idx, index) = {
            let rt = self.runtime.get(id).expect("runtime exists");
            (rt.step_idx, rt.index)
        };
        let env_id = match self.tools.env_for(id, profile_name) {
            Some(env) => env.env_id,
            None => {
                let profile = self.profile(profile_name)?;
                match self.tools.acquire_env(
                    id,
                    profile_name,
                    profile.disk_units,
                    profile.prep_latency,
                    now,
                ) {
                    Ok(env) => {
                        self.emit(ev::ENV_ACQUIRED, Some(id), None, profile.disk_units);
                        env
                    }
                    Err(e) => {
                        let first = !std::mem::replace(
                            &mut self.runtime.get_mut(id).expect("runtime").reported_exhausted,
                            true,
                        );
                        if first {
                            self.emit(ev::RESOURCE_EXHAUSTED, Some(id), None, 0);
                        }
                        let _ = e;
                        self.env_retry.insert(id.clone());
                        return Ok(false);
                    }
                }
            }
        };
        let env = self.tools.env(env_id).expect("acquired env").clone();
        let residual = env.ready_at().saturating_sub(now);
        let mut rng = tool_latency_rng(self.seed, index, step_idx);
        let duration = sampler.sample(&mut rng);
        let due = now + residual + duration;
        self.registry
            .apply(id, &ProgramEvent::ToolCallIssued { env: env_id }, now)
            .map_err(|e| SimError::ConfigError(e.to_string()))?;
        let placement = self.registry.get(id).expect("known").placement;
        if let Some(b) = placement {
            self.backend_mut(b).touch(id, now);
            if let PolicyKind::TtlPin { .. } = self.policy {
                let ttl = self.ttl.predict();
                self.backend_mut(b)
                    .pinned_until
                    .insert(id.clone(), now + ttl);
            }
            self.backend_mut(b).decoding.remove(id);
        }
        {
            let rt = self.runtime.get_mut(id).expect("runtime");
            rt.pending_result = Some((due, result_tokens));
            rt.reported_exhausted = false;
            if rt.first_call_tick.is_none() {
                rt.first_call_tick = Some(now);
            }
            if rt.used_envs.insert(env_id) {
                let saved = env.prep_latency.saturating_sub(residual);
                self.prep_savings += saved;
            }
        }
        self.tool_due.entry(due).or_default().push(id.clone());
        self.stats.steps += 1;
        self.emit(ev::TOOL_STARTED, Some(id), placement, duration);
        self.env_retry.remove(id);
        self.progress = true;
        Ok(true)
    }

    fn deliver_tool_results(&mut self) -> Result<(), SimError> {
        let now = self.clock;
        let Some(mut due) = self.tool_due.remove(&now) else {
            return Ok(());
        };
        due.sort();
        due.dedup();
        for id in due {
            let Some(rt) = self.runtime.get(&id) else {
                continue;
            };
            let Some((_, result_tokens)) = rt.pending_result else {
                continue;
            };
            if let PolicyKind::TtlPin { .. } = self.policy {
                if let Some(call) = self.registry.get(&id).ok().and_then(|p| p.current_call) {
                    self.ttl.observe(now.saturating_sub(call.issued_at));
                }
            }
            self.registry
                .apply(
                    &id,
                    &ProgramEvent::ToolResultReady {
                        result_tokens,
                    },
                    now,
                )
                .map_err(|e| SimError::ConfigError(e.to_string()))?;
            self.emit(ev::TOOL_COMPLETED, Some(&id), None, result_tokens);
            {
                let rt = self.runtime.get_mut(&id).expect("runtime");
                rt.pending_result = None;
                if rt.first_result_tick.is_none() {
                    rt.first_result_tick = Some(now);
                }
                rt.step_idx += 1;
                rt.step_ready_at = now;
                // Next emission: scripted reasoning or a parked service tool
                // response (service emissions arm on the next chat request).
                if let Some(script) = &rt.script {
                    rt.emission_remaining = script.steps[rt.step_idx].reasoning_tokens.max(1);
                    rt.emission_active = true;
                }
            }
            let program = self.registry.get(&id).expect("known");
            let placement = program.placement;
            if let Some(b) = placement {
                self.backend_mut(b).pinned_until.remove(&id);
                self.admit_to_backend(&id, b, true)?;
            }
            // Service mode: answer the parked tool request.
            if let Some(parked) = self
                .runtime
                .get_mut(&id)
                .and_then(|rt| rt.parked_tool.take())
            {
                let response = crate::gateway::tool_response(&parked, result_tokens, now);
                self.service.deliveries.push((parked.ticket, response));
            }
            self.progress = true;
        }
        Ok(())
    }

    fn retry_exhausted_envs(&mut self) -> Result<(), SimError> {
        let retries: Vec<ProgramId> = self.env_retry.iter().cloned().collect();
        for id in retries {
            let live = self
                .registry
                .get(&id)
                .map(|p| matches!(p.status, ProgramStatus::Reasoning))
                .unwrap_or(false);
            if !live {
                self.env_retry.remove(&id);
                continue;
            }
            let scripted = self
                .runtime
                .get(&id)
                .map(|r| r.script.is_some())
                .unwrap_or(false);
            if scripted {
                self.issue_tool_call(&id)?;
            } else {
                self.service_issue_pending_tool(&id)?;
            }
        }
        Ok(())
    }

    /// Asynchronous preparation for programs near the restore threshold:
    /// the top of the waiting queue, K entries deep.
    fn lookahead_prep(&mut self) -> Result<(), SimError> {
        if !self.async_prep || !self.policy.uses_waiting_queue() {
            return Ok(());
        }
        let k = self.cfg.prep_lookahead();
        let top: Vec<ProgramId> = self
            .queue
            .ordered(|id| self.registry.get(id).ok())
            .into_iter()
            .take(k)
            .collect();
        for id in top {
            self.start_prep_for(&id)?;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Monitor pass
    // ------------------------------------------------------------------

    fn monitor_pass(&mut self) -> Result<(), SimError> {
        // Unhealthy backends lose their programs back to the queue first.
        let unhealthy: Vec<BackendId> = self
            .backends
            .iter()
            .filter(|b| !b.healthy)
            .map(|b| b.id)
            .collect();
        for b in unhealthy {
            let victims: Vec<ProgramId> = self
                .registry
                .placed_on(b)
                .into_iter()
                .map(|p| p.id.clone())
                .collect();
            for id in victims {
                if self.policy.uses_waiting_queue() {
                    self.apply_pause(&id, ev::UNHEALTHY_PAUSE)?;
                } else {
                    // Request-level: drop the cache and requeue the work.
                    let _ = self.backend_mut(b).evict(&id);
                    self.registry
                        .apply(&id, &ProgramEvent::PauseRequested, self.clock)
                        .map_err(|e| SimError::ConfigError(e.to_string()))?;
                    self.emit(ev::UNHEALTHY_PAUSE, Some(&id), Some(b), 0);
                    self.ra_waiting.push_front(id.clone());
                }
            }
        }
        if !self.policy.uses_waiting_queue() {
            return Ok(());
        }
        let view = self.cluster_view();
        let pauses = plan_pauses(&view, &self.cfg.scheduler, self.clock);
        for d in pauses {
            if let ScheduleDecision::Pause(id) = d {
                self.apply_pause(&id, ev::PAUSED)?;
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Backend advance
    // ------------------------------------------------------------------

    fn advance_backends(&mut self) -> Result<Vec<ProgramId>, SimError> {
        let chunk = self.cfg.scheduler.chunk;
        let now = self.clock;
        let mut emissions_done: Vec<ProgramId> = Vec::new();
        let request_level = !self.policy.uses_waiting_queue();
        for bidx in 0..self.backends.len() {
            let backend_id = self.backends[bidx].id;
            if !self.backends[bidx].healthy {
                continue;
            }
            // Prefill head, with baseline pressure-eviction when blocked.
            let mut progress = self.backends[bidx].advance_prefill(chunk, now);
            if let Some(p) = &progress {
                if p.stalled && request_level {
                    if let Some(victim) = self.pressure_victim(backend_id, &p.program.clone()) {
                        self.pressure_evict(backend_id, &victim)?;
                        progress = self.backends[bidx].advance_prefill(chunk, now);
                    }
                }
            }
            if let Some(p) = progress {
                if p.grew > 0 {
                    let component = if p.recompute_part > 0 {
                        CostComponent::Recompute
                    } else {
                        CostComponent::Prefill
                    };
                    self.charge(backend_id, Some(&p.program), component, p.resident_after);
                    self.charged.insert(p.program.clone());
                    let rt = self.runtime.get_mut(&p.program).expect("runtime");
                    rt.materialized = rt.materialized.max(p.resident_after);
                    self.progress = true;
                    if p.finished {
                        self.emit(
                            ev::PREFILL_DONE,
                            Some(&p.program),
                            Some(backend_id),
                            p.resident_after,
                        );
                        self.sync_decoding(&p.program.clone());
                    }
                }
            }
            // Decode: every eligible program emits one token, stalling only
            // on physical exhaustion.
            let decoders: Vec<ProgramId> = self.backends[bidx]
                .decoding
                .iter()
                .filter(|id| !self.charged.contains(*id))
                .cloned()
                .collect();
            let mut stall_logged = false;
            for id in decoders {
                if self.cfg.decode_guard {
                    let commit = self.committed_tokens(backend_id) as f64;
                    let limit =
                        self.cfg.scheduler.lambda_max * self.cfg.cluster.capacity_tokens as f64;
                    if commit > limit {
                        self.stats.decode_stall_ticks += 1;
                        continue;
                    }
                }
                let mut grown = self.backends[bidx].grow_decode(&id, now);
                if grown.is_none() && request_level {
                    let victim = self
                        .pressure_victim(backend_id, &id)
                        .or_else(|| self.preempt_victim(backend_id, &id));
                    if let Some(victim) = victim {
                        self.pressure_evict(backend_id, &victim)?;
                        grown = self.backends[bidx].grow_decode(&id, now);
                    }
                }
                match grown {
                    Some(resident_after) => {
                        self.registry
                            .apply(&id, &ProgramEvent::TokensDecoded { count: 1 }, now)
                            .map_err(|e| SimError::ConfigError(e.to_string()))?;
                        let context = self.registry.get(&id).expect("known").context_tokens;
                        debug_assert_eq!(context, resident_after);
                        self.charge(backend_id, Some(&id), CostComponent::Decode, context);
                        self.charged.insert(id.clone());
                        let rt = self.runtime.get_mut(&id).expect("runtime");
                        rt.materialized = rt.materialized.max(resident_after);
                        rt.emission_remaining -= 1;
                        let done = rt.emission_remaining == 0;
                        self.progress = true;
                        if done {
                            let rt = self.runtime.get_mut(&id).expect("runtime");
                            rt.emission_active = false;
                            self.backends[bidx].decoding.remove(&id);
                            let latency = now.saturating_sub(
                                self.runtime.get(&id).expect("runtime").step_ready_at,
                            );
                            self.step_latencies.push(latency);
                            self.emit(
                                ev::STEP_EMISSION_COMPLETE,
                                Some(&id),
                                Some(backend_id),
                                context,
                            );
                            emissions_done.push(id.clone());
                        }
                    }
                    None => {
                        if !stall_logged {
                            self.emit(ev::DECODE_STALL, None, Some(backend_id), 0);
                            stall_logged = true;
                        }
                        self.stats.decode_stall_ticks += 1;
                    }
                }
            }
        }
        Ok(emissions_done)
    }

    fn handle_emission_complete(&mut self, id: &ProgramId) -> Result<(), SimError> {
        let scripted = self.runtime.get(id).map(|r| r.script.is_some()).unwrap_or(false);
        if scripted {
            let has_tool = {
                let rt = self.runtime.get(id).expect("runtime");
                let script = rt.script.as_ref().expect("scripted");
                script.steps[rt.step_idx].tool.is_some()
            };
            if has_tool {
                self.issue_tool_call(id)?;
            } else {
                self.release_program(id)?;
            }
            return Ok(());
        }
        // Service mode: deliver the parked chat response; the program idles
        // on its backend until the next request.
        if let Some(parked) = self.runtime.get_mut(id).and_then(|rt| rt.parked_chat.take()) {
            let program = self.registry.get(id).expect("known");
            let response =
                crate::gateway::chat_response(&parked, program, self.clock);
            self.service.deliveries.push((parked.ticket, response));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Accounting
    // ------------------------------------------------------------------

    fn account_tick(&mut self) {
        let now = self.clock;
        let waiting_min_context: Option<Tokens> = {
            let paused = self.registry.paused();
            if paused.is_empty() {
                None
            } else {
                paused.iter().map(|p| p.context_tokens).min()
            }
        };
        for bidx in 0..self.backends.len() {
            let backend_id = self.backends[bidx].id;
            self.backends[bidx].assert_pool_bound();
            // Idle resident caches: Acting programs mid-tool, programs
            // waiting for a prefill slot, service programs between turns.
            let idle: Vec<(ProgramId, Tokens)> = self.backends[bidx]
                .resident_programs()
                .filter(|(id, tokens)| !self.charged.contains(*id) && **tokens > 0)
                .map(|(id, tokens)| (id.clone(), *tokens))
                .collect();
            for (id, tokens) in idle {
                self.charge(backend_id, Some(&id), CostComponent::Caching, tokens);
            }
            // Uncommitted capacity is waste only while programs queue.
            if waiting_min_context.is_some() {
                let committed = self.committed_tokens(backend_id);
                let unused = self
                    .cfg
                    .cluster
                    .capacity_tokens
                    .saturating_sub(committed);
                self.charge(backend_id, None, CostComponent::Unused, unused);
                let slot = &mut self.interval_min_queued[bidx];
                *slot = match (*slot, waiting_min_context) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (None, b) => b,
                    (a, None) => a,
                };
            }
        }
        // Interval flush on the last tick before the next monitor pass.
        let dt = self.cfg.scheduler.delta_t;
        if (now + 1) % dt == 0 {
            let snapshot: Vec<Tokens> =
                self.backends.iter().map(|b| b.resident_total()).collect();
            let imbalance = if snapshot.len() >= 2 {
                let max = *snapshot.iter().max().expect("nonempty");
                let min = *snapshot.iter().min().expect("nonempty");
                (max - min) as f64 / self.cfg.cluster.capacity_tokens as f64
            } else {
                0.0
            };
            self.imbalance_snapshots.push(snapshot.clone());
            let hit_rate = self.ledger.kv_hit_rate().ok();
            for bidx in 0..self.backends.len() {
                let comps = self.interval_components[bidx];
                self.interval_rows.push(IntervalRow {
                    tick: now,
                    backend: self.backends[bidx].id,
                    resident_tokens: snapshot[bidx],
                    decode: comps[0],
                    prefill: comps[1],
                    recompute: comps[2],
                    unused: comps[3],
                    caching: comps[4],
                    hit_rate,
                    imbalance,
                });
                self.unused_audit.push(UnusedAudit {
                    tick: now,
                    backend: self.backends[bidx].id,
                    unused_token_ticks: self.interval_unused[bidx],
                    min_queued_context: self.interval_min_queued[bidx],
                });
                self.interval_components[bidx] = [0; 5];
                self.interval_unused[bidx] = 0;
                self.interval_min_queued[bidx] = None;
            }
        }
    }

    /// Liveness backstop for scripted runs: if a tick passed with no
    /// progress and nothing scheduled, the pool is gridlocked by Reasoning
    /// programs. Evicting the shortest one trades recompute for liveness;
    /// tuned workloads never reach this.
    fn break_deadlock(&mut self) -> Result<(), SimError> {
        if self.mode != EngineMode::Trace || self.progress {
            return Ok(());
        }
        if !self.tool_due.is_empty() {
            return Ok(());
        }
        let live: Vec<&crate::program::AgentProgram> = self
            .registry
            .iter()
            .filter(|p| !p.status.is_stopped())
            .collect();
        if live.is_empty() {
            return Ok(());
        }
        // The victim must actually hold cache, or evicting it frees nothing.
        let victim = live
            .iter()
            .filter(|p| matches!(p.status, ProgramStatus::Reasoning))
            .filter(|p| {
                p.placement
                    .map(|b| self.backend(b).resident_of(&p.id).unwrap_or(0) > 0)
                    .unwrap_or(false)
            })
            .min_by_key(|p| (p.context_tokens, p.id.clone()))
            .map(|p| p.id.clone());
        match victim {
            Some(id) => {
                self.stats.forced_reasoning_evictions += 1;
                self.emit(ev::FORCED_EVICTION, Some(&id), None, 0);
                if self.policy.uses_waiting_queue() {
                    self.apply_pause(&id, ev::PAUSED)?;
                } else {
                    let placement = self.registry.get(&id).expect("known").placement;
                    if let Some(b) = placement {
                        self.pressure_evict(b, &id)?;
                    }
                }
                Ok(())
            }
            None => Err(SimError::NoProgress(self.clock)),
        }
    }

    // ------------------------------------------------------------------
    // The tick
    // ------------------------------------------------------------------

    pub fn step(&mut self) -> Result<(), SimError> {
        self.charged.clear();
        self.progress = false;
        let now = self.clock;

        // 1. Arrivals.
        if self.mode == EngineMode::Trace {
            if now == 0 {
                self.spawn_closed_loop_arrivals()?;
            }
            self.spawn_open_loop_arrivals()?;
        }
        // 2. Environment preparation completions.
        let ready = self.tools.tick(now);
        for env in ready {
            let owner = self.tools.env(env).expect("env exists").owner.clone();
            self.emit(ev::ENV_READY, Some(&owner), None, 0);
            self.progress = true;
        }
        // 3. Tool completions.
        self.deliver_tool_results()?;
        // 3b. Environment-acquisition retries.
        self.retry_exhausted_envs()?;
        // 4. Periodic monitor (pauses).
        if now % self.cfg.scheduler.delta_t == 0 {
            self.monitor_pass()?;
        }
        // 5. Restore/admission scan.
        self.restore_scan()?;
        // 6. Backend advance.
        let emissions = self.advance_backends()?;
        for id in emissions {
            self.handle_emission_complete(&id)?;
        }
        // 7. Capacity freed by completions goes straight back to the queue.
        self.restore_scan()?;
        self.service_issue_all_pending()?;
        // 8. Async preparation for near-restore programs.
        self.lookahead_prep()?;
        // 9. Accounting.
        self.account_tick();
        // 10. Liveness backstop.
        self.break_deadlock()?;

        self.clock += 1;
        Ok(())
    }

    pub fn trace_done(&self) -> bool {
        match &self.trace_state {
            Some(ts) => {
                ts.next_program >= ts.trace.programs.len()
                    && ts.open_arrivals.is_empty()
                    && self.registry.iter().all(|p| p.status.is_stopped())
            }
            None => false,
        }
    }

    /// Metrics over everything accounted so far.
    pub fn report_now(&self) -> MetricsReport {
        let duration = self.clock;
        let minutes = (duration as f64 * self.cfg.tick_seconds) / 60.0;
        let throughput = if minutes > 0.0 {
            self.stats.steps as f64 / minutes
        } else {
            0.0
        };
        let max_imbalance = if self.backends.len() >= 2 {
            imbalance_series(&self.imbalance_snapshots, self.cfg.cluster.capacity_tokens)
                .map(|s| s.into_iter().fold(0.0, f64::max))
                .unwrap_or(0.0)
        } else {
            0.0
        };
        MetricsReport {
            throughput_steps_per_min: throughput,
            kv_hit_rate: self.ledger.kv_hit_rate().ok(),
            max_imbalance,
            per_step_latency: LatencySummary::from_samples(self.step_latencies.clone()),
            cost_breakdown: self.ledger.decompose(),
            disk_peak: self.tools.disk_peak,
            prep_overlap_savings: self.prep_savings,
            total_steps: self.stats.steps,
            duration_ticks: duration,
            completed_programs: self.stats.completed_programs,
            pauses: self.stats.pauses,
            restores: self.stats.restores,
            resume_hits: self.stats.resume_hits,
            resume_misses: self.stats.resume_misses,
            decode_stall_ticks: self.stats.decode_stall_ticks,
            forced_reasoning_evictions: self.stats.forced_reasoning_evictions,
            reasoning_eviction_recompute_tokens: self.stats.reasoning_eviction_recompute_tokens,
        }
    }

    pub fn finish(self) -> RunOutput {
        let report = self.report_now();
        let imbalance_per_interval = if self.backends.len() >= 2 {
            imbalance_series(&self.imbalance_snapshots, self.cfg.cluster.capacity_tokens)
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        let per_program = self
            .registry
            .iter()
            .map(|p| {
                let rt = self.runtime.get(&p.id);
                ProgramOutcome {
                    id: p.id.clone(),
                    steps: p.step_count,
                    total_tokens: p.total_tokens,
                    created_at: rt.map(|r| r.created_at).unwrap_or(0),
                    first_result_tick: rt.and_then(|r| r.first_result_tick),
                    stopped: p.status.is_stopped(),
                }
            })
            .collect();
        let end_tick = self.clock;
        RunOutput {
            policy: self.policy,
            report,
            events: self.events,
            interval_rows: self.interval_rows,
            imbalance_per_interval,
            unused_audit: self.unused_audit,
            per_program,
            end_tick,
        }
    }

    /// Test/experiment hook: flips a backend's health flag.
    pub fn set_backend_health(&mut self, backend: BackendId, healthy: bool) {
        self.backend_mut(backend).healthy = healthy;
    }

    // ------------------------------------------------------------------
    // Service-mode support (gateway side lives in crate::gateway)
    // ------------------------------------------------------------------

    /// Grows a program's context for client-side history the engine has not
    /// accounted yet; plumbing only, no resume accounting.
    pub(crate) fn service_grow_context(
        &mut self,
        id: &ProgramId,
        delta: Tokens,
    ) -> Result<(), SimError> {
        let placement = {
            let p = self
                .registry
                .get_mut(id)
                .ok_or_else(|| SimError::ConfigError(format!("unknown program {id}")))?;
            p.context_tokens += delta;
            p.total_tokens += delta;
            p.placement
        };
        if let Some(b) = placement {
            self.admit_to_backend(id, b, false)?;
        }
        Ok(())
    }

    pub(crate) fn service_sync(&mut self, id: &ProgramId) {
        self.sync_decoding(id);
    }

    /// Issues a parked tool request once its program is live and reasoning.
    pub(crate) fn service_issue_pending_tool(&mut self, id: &ProgramId) -> Result<(), SimError> {
        let ready = {
            let Ok(p) = self.registry.get(id) else {
                return Ok(());
            };
            matches!(p.status, ProgramStatus::Reasoning)
        };
        let pending = {
            let Some(rt) = self.runtime.get(id) else {
                return Ok(());
            };
            rt.parked_tool.is_some() && rt.pending_result.is_none()
        };
        if !ready || !pending {
            return Ok(());
        }
        let (profile_name, result_tokens) = {
            let rt = self.runtime.get(id).expect("checked");
            let parked = rt.parked_tool.as_ref().expect("checked");
            (parked.profile.clone(), parked.result_tokens)
        };
        let profile = self
            .cfg
            .envs
            .profiles
            .get(&profile_name)
            .cloned()
            .unwrap_or(EnvProfile {
                disk_units: 1,
                prep_latency: 0,
                sampler: crate::tools::LatencySampler::Deterministic { ticks: 4 },
            });
        if !self.cfg.envs.profiles.contains_key(&profile_name) {
            self.cfg
                .envs
                .profiles
                .insert(profile_name.clone(), profile.clone());
        }
        self.issue_tool(id, &profile_name, profile.sampler, result_tokens)?;
        Ok(())
    }

    /// Service-mode sweep: issue any parked tools whose programs became
    /// ready (e.g. after a restore).
    fn service_issue_all_pending(&mut self) -> Result<(), SimError> {
        if self.mode != EngineMode::Service {
            return Ok(());
        }
        let ids: Vec<ProgramId> = self
            .runtime
            .iter()
            .filter(|(_, rt)| rt.parked_tool.is_some() && rt.pending_result.is_none())
            .map(|(id, _)| id.clone())
            .collect();
        for id in ids {
            self.service_issue_pending_tool(&id)?;
        }
        Ok(())
    }
}

/// Runs a trace under one policy to completion (or the configured duration
/// cap). Identical `(trace, policy, config)` produce bit-identical outputs.
pub fn run_policy(
    trace: &WorkloadTrace,
    policy: PolicyKind,
    cfg: &EngineConfig,
) -> Result<RunOutput, SimError> {
    if trace.programs.is_empty() {
        return Err(SimError::ConfigError("empty trace".into()));
    }
    let mut engine = Engine::new_trace(cfg.clone(), policy, trace.clone())?;
    let cap = cfg.duration_ticks;
    loop {
        if let Some(cap) = cap {
            if engine.clock >= cap {
                break;
            }
        }
        if engine.trace_done() {
            break;
        }
        if engine.clock >= HARD_TICK_LIMIT {
            return Err(SimError::NoProgress(engine.clock));
        }
        engine.step()?;
    }
    Ok(engine.finish())
}
