//! The program-aware scheduling core.
//!
//! Periodic thrashing detection with a time-decayed effective load, shortest
//! context first pause selection (Acting programs strictly before Reasoning
//! ones), and score-ordered restore from a single waiting queue shared by all
//! backend replicas. Pauses run only on monitor passes every `delta_t` ticks;
//! restores additionally run whenever capacity frees up, which is what keeps
//! the unused-capacity cost of any backend below `c_min · Δt` while the queue
//! is nonempty.

use crate::program::{AgentProgram, ProgramPhase, ProgramStatus};
use crate::types::{BackendId, ProgramId, Tick, Tokens};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("invalid decay spec: {0}")]
    InvalidSpec(String),
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("restore of {program} would exceed the high watermark on {backend:?}")]
    CapacityExceeded {
        program: ProgramId,
        backend: BackendId,
    },
    #[error("illegal transition")]
    IllegalTransition,
}

/// Time-decay weight applied to an Acting program's tokens in the capacity
/// check. Admissible decays satisfy f(0) = 1 and the multiplicative
/// semigroup law f(a+b) = f(a)·f(b); `Constant1` is the no-decay degenerate
/// for short-tool regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecaySpec {
    Constant1,
    Geometric { base: f64 },
    Exponential { rate: f64 },
}

impl DecaySpec {
    pub fn geometric(base: f64) -> Result<Self, SchedulerError> {
        let spec = DecaySpec::Geometric { base };
        spec.validate()?;
        Ok(spec)
    }

    pub fn exponential(rate: f64) -> Result<Self, SchedulerError> {
        let spec = DecaySpec::Exponential { rate };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        match *self {
            DecaySpec::Constant1 => Ok(()),
            DecaySpec::Geometric { base } if base > 1.0 => Ok(()),
            DecaySpec::Geometric { base } => Err(SchedulerError::InvalidSpec(format!(
                "geometric base must be > 1, got {base}"
            ))),
            DecaySpec::Exponential { rate } if rate > 0.0 => Ok(()),
            DecaySpec::Exponential { rate } => Err(SchedulerError::InvalidSpec(format!(
                "exponential rate must be > 0, got {rate}"
            ))),
        }
    }

    /// f(t) for elapsed acting time `t` (ticks).
    pub fn eval(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        match *self {
            DecaySpec::Constant1 => 1.0,
            DecaySpec::Geometric { base } => base.powf(-t),
            DecaySpec::Exponential { rate } => (-rate * t).exp(),
        }
    }
}

/// Hysteresis watermark + monitor configuration. Defaults follow the
/// evaluated setup: Δt = 5 ticks, f(t) = 2^{-t}, λ_max = λ_min = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub delta_t: Tick,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub decay: DecaySpec,
    /// Prefill chunk size in tokens per tick per backend.
    pub chunk: Tokens,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            delta_t: 5,
            lambda_max: 1.0,
            lambda_min: 1.0,
            decay: DecaySpec::Geometric { base: 2.0 },
            chunk: 64,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.delta_t < 1 {
            return Err(SchedulerError::InvalidConfig("delta_t must be >= 1".into()));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max && self.lambda_max <= 1.0)
        {
            return Err(SchedulerError::InvalidConfig(format!(
                "need 0 < lambda_min <= lambda_max <= 1, got {} / {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if self.chunk == 0 {
            return Err(SchedulerError::InvalidConfig("chunk must be >= 1".into()));
        }
        self.decay.validate()
    }
}

/// Restore priority: shortest-first with a strict preference for programs
/// already back in the Reasoning phase (their decode is immediately
/// productive).
pub fn restore_score(context_tokens: Tokens, phase: ProgramPhase) -> f64 {
    let indicator = if phase == ProgramPhase::Reasoning {
        1.0
    } else {
        0.0
    };
    1.0 / context_tokens as f64 + indicator
}

/// Pause priority: shortest-first with a strict preference for Acting
/// programs, whose caches are idle anyway.
pub fn pause_score(context_tokens: Tokens, phase: ProgramPhase) -> f64 {
    let indicator = if phase == ProgramPhase::Acting {
        1.0
    } else {
        0.0
    };
    1.0 / context_tokens as f64 + indicator
}

/// The capacity-check weight of one placed program: Reasoning programs count
/// their full context, Acting programs are discounted by the decay of their
/// current tool call's age.
pub fn program_weight(program: &AgentProgram, decay: DecaySpec, now: Tick) -> f64 {
    match program.status {
        ProgramStatus::Acting { acting_since } => {
            program.context_tokens as f64 * decay.eval(now.saturating_sub(acting_since) as f64)
        }
        _ => program.context_tokens as f64,
    }
}

/// Effective load of one backend under the time-decayed capacity check.
pub fn effective_load<'a>(
    programs: impl IntoIterator<Item = &'a AgentProgram>,
    decay: DecaySpec,
    now: Tick,
) -> f64 {
    programs
        .into_iter()
        .map(|p| program_weight(p, decay, now))
        .sum()
}

/// Memory that must be released to bring the backend back under the high
/// watermark: `max(0, eff_load − λ_max · C_total)`.
pub fn thrashing_pressure(capacity_tokens: Tokens, eff_load: f64, lambda_max: f64) -> f64 {
    (eff_load - lambda_max * capacity_tokens as f64).max(0.0)
}

/// One pause/eviction candidate as seen by `select_evictions`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionCandidate {
    pub id: ProgramId,
    pub context_tokens: Tokens,
    pub phase: ProgramPhase,
    /// Tool-call issue tick for Acting candidates; pause ties on equal
    /// context prefer the freshest call (cheapest idle cache to drop).
    pub acting_since: Option<Tick>,
}

/// Not enough candidate context to cover the requested release; everything
/// was selected and `remaining` tokens stay outstanding.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("eviction shortfall: {remaining} tokens uncovered")]
pub struct EvictionShortfall {
    pub selected: Vec<ProgramId>,
    pub remaining: Tokens,
}

/// Greedy shortest-first eviction within priority tiers: every Acting
/// candidate is considered before any Reasoning candidate, and within a tier
/// candidates are taken in ascending context size until the cumulative
/// context covers `delta_c`. Minimizes the quadratic recomputation cost
/// whenever the greedy prefix covers `delta_c` exactly.
pub fn select_evictions(
    candidates: &[EvictionCandidate],
    delta_c: Tokens,
) -> Result<Vec<ProgramId>, EvictionShortfall> {
    if delta_c == 0 {
        return Ok(Vec::new());
    }
    let mut ordered: Vec<&EvictionCandidate> = candidates.iter().collect();
    ordered.sort_by(|a, b| {
        let tier_a = a.phase == ProgramPhase::Acting;
        let tier_b = b.phase == ProgramPhase::Acting;
        tier_b
            .cmp(&tier_a)
            .then(a.context_tokens.cmp(&b.context_tokens))
            // Later call first: its cache has idled the least.
            .then(b.acting_since.cmp(&a.acting_since))
            .then(a.id.cmp(&b.id))
    });
    let mut selected = Vec::new();
    let mut covered: Tokens = 0;
    for cand in ordered {
        if covered >= delta_c {
            break;
        }
        covered += cand.context_tokens;
        selected.push(cand.id.clone());
    }
    if covered >= delta_c {
        Ok(selected)
    } else {
        Err(EvictionShortfall {
            selected,
            remaining: delta_c - covered,
        })
    }
}

/// The single waiting queue shared by every backend replica. Membership is
/// exactly the Paused programs; ordering is recomputed from live program
/// state at scan time (a tool result arriving mid-wait changes the score).
#[derive(Debug, Default, Clone)]
pub struct GlobalWaitQueue {
    entries: BTreeMap<ProgramId, QueueEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct QueueEntry {
    enqueued_at: Tick,
    starvation: u64,
}

impl GlobalWaitQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, id: ProgramId, now: Tick) {
        self.entries.entry(id).or_insert(QueueEntry {
            enqueued_at: now,
            starvation: 0,
        });
    }

    pub fn remove(&mut self, id: &ProgramId) -> bool {
        self.entries.remove(id).is_some()
    }

    pub fn contains(&self, id: &ProgramId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bump_starvation(&mut self, id: &ProgramId) {
        if let Some(e) = self.entries.get_mut(id) {
            e.starvation += 1;
        }
    }

    pub fn starvation(&self, id: &ProgramId) -> u64 {
        self.entries.get(id).map(|e| e.starvation).unwrap_or(0)
    }

    /// Queue in restore order: descending score, ties broken by earlier
    /// paused_since, then id. Total order for any fixed (c, τ, since, id).
    pub fn ordered<'a>(&self, lookup: impl Fn(&ProgramId) -> Option<&'a AgentProgram>) -> Vec<ProgramId> {
        let mut scored: Vec<(f64, Tick, &ProgramId)> = self
            .entries
            .iter()
            .filter_map(|(id, entry)| {
                let p = lookup(id)?;
                let since = match p.status {
                    ProgramStatus::Paused { paused_since } => paused_since,
                    _ => entry.enqueued_at,
                };
                Some((restore_score(p.context_tokens, p.phase), since, id))
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(b.2))
        });
        scored.into_iter().map(|(_, _, id)| id.clone()).collect()
    }

    /// Smallest paused context; drives the unused-cost bound.
    pub fn min_context<'a>(
        &self,
        lookup: impl Fn(&ProgramId) -> Option<&'a AgentProgram>,
    ) -> Option<Tokens> {
        self.entries
            .keys()
            .filter_map(|id| lookup(id).map(|p| p.context_tokens))
            .min()
    }
}

/// Scheduling decisions are planned against a point-in-time view of the
/// cluster, then applied by the engine; planning has no side effects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleDecision {
    Pause(ProgramId),
    Restore(ProgramId, BackendId),
    Noop,
}

#[derive(Debug, Clone)]
pub struct BackendView {
    pub id: BackendId,
    pub capacity_tokens: Tokens,
    pub healthy: bool,
    pub programs: Vec<ProgramView>,
}

#[derive(Debug, Clone)]
pub struct ProgramView {
    pub id: ProgramId,
    pub context_tokens: Tokens,
    pub phase: ProgramPhase,
    pub status_acting_since: Option<Tick>,
}

impl ProgramView {
    fn weight(&self, decay: DecaySpec, now: Tick) -> f64 {
        match self.status_acting_since {
            Some(since) => {
                self.context_tokens as f64 * decay.eval(now.saturating_sub(since) as f64)
            }
            None => self.context_tokens as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueuedView {
    pub id: ProgramId,
    pub context_tokens: Tokens,
    pub phase: ProgramPhase,
    pub paused_since: Tick,
    /// Acting-phase queue entries keep their call age for the weight check.
    pub acting_since: Option<Tick>,
}

#[derive(Debug, Clone)]
pub struct ClusterView {
    pub backends: Vec<BackendView>,
    /// Already in restore order (see [`GlobalWaitQueue::ordered`]).
    pub queue: Vec<QueuedView>,
}

/// Plans the pause half of a monitor pass. A backend needs releases when
/// either measure breaches the high watermark:
/// - the decayed effective load (the time-decay thrashing check), or
/// - the raw committed contexts (physical pool demand — decayed weights can
///   hide an over-committed pool behind long-idle Acting caches).
///
/// Both coincide exactly under `Constant1`. Pauses take the cheapest Acting
/// programs first (shortest context, then freshest call); Reasoning programs
/// are never paused here — memory admitted to a decoding program stays
/// reserved for it, and any uncovered remainder is deferred.
pub fn plan_pauses(view: &ClusterView, cfg: &SchedulerConfig, now: Tick) -> Vec<ScheduleDecision> {
    let mut decisions = Vec::new();
    for backend in &view.backends {
        if !backend.healthy {
            continue;
        }
        let mut eff: f64 = backend
            .programs
            .iter()
            .map(|p| p.weight(cfg.decay, now))
            .sum();
        let mut raw: f64 = backend
            .programs
            .iter()
            .map(|p| p.context_tokens as f64)
            .sum();
        let limit = cfg.lambda_max * backend.capacity_tokens as f64;
        if eff <= limit && raw <= limit {
            continue;
        }
        let mut acting: Vec<&ProgramView> = backend
            .programs
            .iter()
            .filter(|p| p.phase == ProgramPhase::Acting)
            .collect();
        acting.sort_by(|a, b| {
            a.context_tokens
                .cmp(&b.context_tokens)
                .then(b.status_acting_since.cmp(&a.status_acting_since))
                .then(a.id.cmp(&b.id))
        });
        for p in acting {
            if eff <= limit && raw <= limit {
                break;
            }
            eff -= p.weight(cfg.decay, now);
            raw -= p.context_tokens as f64;
            decisions.push(ScheduleDecision::Pause(p.id.clone()));
        }
    }
    decisions
}

#[derive(Debug, Clone)]
struct RestoreSlot {
    id: BackendId,
    capacity: Tokens,
    eff: f64,
    raw: f64,
    healthy: bool,
    /// Acting programs still on the backend, pause order (shortest first,
    /// freshest call breaking ties).
    acting: Vec<(ProgramId, Tokens, f64)>,
}

/// Plans restores from the global queue, in score order, onto the
/// least-loaded backend below the low watermark that stays under the high
/// watermark after admission — checked against both the decayed load and the
/// raw commitment, since the restored cache materializes in full.
///
/// When only the raw commitment blocks a Reasoning-phase restore, the
/// planner evicts idle Acting caches to make room (the decay mechanism's
/// entire point: runnable work displaces long-idle caches). Acting-phase
/// programs never displace other Acting caches — that would trade one
/// recomputation for another. Entries that fit nowhere are skipped, not
/// blocking the queue, so any leftover free capacity is smaller than every
/// waiting context.
pub fn plan_restores(
    view: &ClusterView,
    cfg: &SchedulerConfig,
    now: Tick,
    exclude: &[ProgramId],
) -> (Vec<ScheduleDecision>, Vec<ProgramId>) {
    let mut decisions = Vec::new();
    let mut starved = Vec::new();
    let mut slots: Vec<RestoreSlot> = view
        .backends
        .iter()
        .map(|b| {
            let mut acting: Vec<(ProgramId, Tokens, f64)> = b
                .programs
                .iter()
                .filter(|p| p.phase == ProgramPhase::Acting)
                .map(|p| (p.id.clone(), p.context_tokens, p.weight(cfg.decay, now)))
                .collect();
            acting.sort_by(|x, y| x.1.cmp(&y.1).then(x.0.cmp(&y.0)));
            RestoreSlot {
                id: b.id,
                capacity: b.capacity_tokens,
                eff: b.programs.iter().map(|p| p.weight(cfg.decay, now)).sum(),
                raw: b
                    .programs
                    .iter()
                    .map(|p| p.context_tokens as f64)
                    .sum(),
                healthy: b.healthy,
                acting,
            }
        })
        .collect();
    for entry in &view.queue {
        if exclude.contains(&entry.id) {
            continue;
        }
        let weight = match entry.acting_since {
            Some(since) if entry.phase == ProgramPhase::Acting => {
                entry.context_tokens as f64 * cfg.decay.eval(now.saturating_sub(since) as f64)
            }
            _ => entry.context_tokens as f64,
        };
        let raw_in = entry.context_tokens as f64;
        let eligible = |s: &RestoreSlot| {
            s.healthy
                && s.eff < cfg.lambda_min * s.capacity as f64
                && s.eff + weight <= cfg.lambda_max * s.capacity as f64
        };
        // Plain fit: both measures stay under the watermark.
        let plain = slots
            .iter_mut()
            .filter(|s| eligible(s) && s.raw + raw_in <= cfg.lambda_max * s.capacity as f64)
            .min_by(|a, b| a.eff.partial_cmp(&b.eff).unwrap_or(std::cmp::Ordering::Equal));
        if let Some(slot) = plain {
            slot.eff += weight;
            slot.raw += raw_in;
            decisions.push(ScheduleDecision::Restore(entry.id.clone(), slot.id));
            continue;
        }
        // Demand-driven eviction for runnable work only.
        let displaced = if entry.phase == ProgramPhase::Reasoning {
            let target = slots
                .iter_mut()
                .filter(|s| {
                    if !eligible(s) {
                        return false;
                    }
                    let limit = cfg.lambda_max * s.capacity as f64;
                    let need = s.raw + raw_in - limit;
                    let coverable: f64 = s.acting.iter().map(|(_, c, _)| *c as f64).sum();
                    need <= coverable
                })
                .min_by(|a, b| a.eff.partial_cmp(&b.eff).unwrap_or(std::cmp::Ordering::Equal));
            if let Some(slot) = target {
                let limit = cfg.lambda_max * slot.capacity as f64;
                while slot.raw + raw_in > limit {
                    let (victim, c, w) = slot.acting.remove(0);
                    slot.raw -= c as f64;
                    slot.eff -= w;
                    decisions.push(ScheduleDecision::Pause(victim));
                }
                slot.eff += weight;
                slot.raw += raw_in;
                decisions.push(ScheduleDecision::Restore(entry.id.clone(), slot.id));
                true
            } else {
                false
            }
        } else {
            false
        };
        if !displaced {
            starved.push(entry.id.clone());
        }
    }
    (decisions, starved)
}

/// One full monitor pass: pauses first, then restores (never re-admitting a
/// program paused in the same batch). Idempotent on a balanced cluster.
pub fn schedule_tick(
    view: &ClusterView,
    cfg: &SchedulerConfig,
    now: Tick,
) -> (Vec<ScheduleDecision>, Vec<ProgramId>) {
    let pauses = plan_pauses(view, cfg, now);
    let paused_ids: Vec<ProgramId> = pauses
        .iter()
        .filter_map(|d| match d {
            ScheduleDecision::Pause(id) => Some(id.clone()),
            _ => None,
        })
        .collect();
    // Restores see the pauses' effect on load.
    let mut adjusted = view.clone();
    for backend in &mut adjusted.backends {
        backend.programs.retain(|p| !paused_ids.contains(&p.id));
    }
    let (restores, starved) = plan_restores(&adjusted, cfg, now, &paused_ids);
    let mut batch = pauses;
    batch.extend(restores);
    if batch.is_empty() {
        batch.push(ScheduleDecision::Noop);
    }
    (batch, starved)
}
