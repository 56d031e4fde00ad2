//! The agentic-program abstraction and its lifecycle state machine.
//!
//! A program is the scheduling unit: a whole multi-turn agent workflow with
//! identity, context size, tool set, placement, phase and status. Every other
//! module (scheduler, backends, tool manager, gateway) consumes program
//! metadata from here and mutates it only through [`apply_event`], which keeps
//! the state machine pure and replayable.

use crate::types::{BackendId, EnvId, ProgramId, Tick, Tokens};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Execution phase: on-GPU generation vs. waiting on an external tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgramPhase {
    Reasoning,
    Acting,
}

/// Scheduling status. `Reasoning`/`Acting` are the two live (placed) states,
/// `Paused` sits in the global waiting queue, `Stopped` is terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgramStatus {
    Reasoning,
    Acting { acting_since: Tick },
    Paused { paused_since: Tick },
    Stopped,
}

impl ProgramStatus {
    pub fn is_live(&self) -> bool {
        matches!(self, ProgramStatus::Reasoning | ProgramStatus::Acting { .. })
    }

    pub fn is_paused(&self) -> bool {
        matches!(self, ProgramStatus::Paused { .. })
    }

    pub fn is_stopped(&self) -> bool {
        matches!(self, ProgramStatus::Stopped)
    }

    /// Wire-format name used by the `/programs/{id}` projection.
    pub fn wire_name(&self) -> &'static str {
        match self {
            ProgramStatus::Reasoning => "REASONING",
            ProgramStatus::Acting { .. } => "ACTING",
            ProgramStatus::Paused { .. } => "PAUSED",
            ProgramStatus::Stopped => "STOPPED",
        }
    }
}

/// The in-flight tool call of an Acting program. Kept so that a pause/restore
/// cycle can recover `acting_since` (tool age drives the time-decay check) and
/// so release can cancel the call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub env: EnvId,
    pub issued_at: Tick,
}

/// Lifecycle events applied to a program by the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgramEvent {
    ToolCallIssued { env: EnvId },
    ToolResultReady { result_tokens: Tokens },
    TokensDecoded { count: Tokens },
    PauseRequested,
    RestoreGranted { backend: BackendId },
    ReleaseRequested,
}

impl ProgramEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ProgramEvent::ToolCallIssued { .. } => "ToolCallIssued",
            ProgramEvent::ToolResultReady { .. } => "ToolResultReady",
            ProgramEvent::TokensDecoded { .. } => "TokensDecoded",
            ProgramEvent::PauseRequested => "PauseRequested",
            ProgramEvent::RestoreGranted { .. } => "RestoreGranted",
            ProgramEvent::ReleaseRequested => "ReleaseRequested",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("program id {0} already registered")]
    DuplicateId(ProgramId),
    #[error("illegal transition: {event} on {status} (program {program})")]
    IllegalTransition {
        program: ProgramId,
        status: &'static str,
        event: &'static str,
    },
    #[error("unknown program {0}")]
    UnknownProgram(ProgramId),
}

/// A whole agent workflow as a first-class scheduling unit.
///
/// `context_tokens` is monotonically nondecreasing: each step extends the
/// previous context as a prefix, which is what makes cross-step KV reuse
/// possible in the first place.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProgram {
    pub id: ProgramId,
    pub context_tokens: Tokens,
    pub tool_envs: BTreeSet<EnvId>,
    pub placement: Option<BackendId>,
    pub phase: ProgramPhase,
    pub status: ProgramStatus,
    pub step_count: u64,
    pub total_tokens: Tokens,
    /// Tool environment profiles this program declared at creation; used by
    /// asynchronous environment preparation.
    pub requested_profiles: Vec<String>,
    /// In-flight tool call, if any.
    pub current_call: Option<ToolCall>,
}

impl AgentProgram {
    /// New programs enter Paused: admission goes through the global waiting
    /// queue, which unifies first admission and re-admission.
    pub fn new(
        id: ProgramId,
        prompt_tokens: Tokens,
        requested_profiles: Vec<String>,
        now: Tick,
    ) -> Self {
        AgentProgram {
            id,
            context_tokens: prompt_tokens,
            tool_envs: BTreeSet::new(),
            placement: None,
            phase: ProgramPhase::Reasoning,
            status: ProgramStatus::Paused { paused_since: now },
            step_count: 0,
            total_tokens: prompt_tokens,
            requested_profiles,
            current_call: None,
        }
    }

    fn illegal(&self, event: &ProgramEvent) -> ProgramError {
        ProgramError::IllegalTransition {
            program: self.id.clone(),
            status: self.status.wire_name(),
            event: event.name(),
        }
    }
}

/// Applies one lifecycle event, returning the updated program.
///
/// Pure function of `(program, event, now)`: replaying the same event
/// sequence yields a bit-identical program.
pub fn apply_event(
    program: &AgentProgram,
    event: &ProgramEvent,
    now: Tick,
) -> Result<AgentProgram, ProgramError> {
    let mut next = program.clone();
    match (program.status, event) {
        (ProgramStatus::Reasoning, ProgramEvent::TokensDecoded { count }) => {
            next.context_tokens += count;
            next.total_tokens += count;
        }
        (ProgramStatus::Reasoning, ProgramEvent::ToolCallIssued { env }) => {
            next.status = ProgramStatus::Acting { acting_since: now };
            next.phase = ProgramPhase::Acting;
            next.step_count += 1;
            next.current_call = Some(ToolCall {
                env: *env,
                issued_at: now,
            });
            next.tool_envs.insert(*env);
        }
        (ProgramStatus::Acting { .. }, ProgramEvent::ToolResultReady { result_tokens }) => {
            next.context_tokens += result_tokens;
            next.total_tokens += result_tokens;
            next.status = ProgramStatus::Reasoning;
            next.phase = ProgramPhase::Reasoning;
            next.current_call = None;
        }
        // A tool may finish while its program sits paused in the queue: the
        // result is absorbed immediately (it raises the restore score), but
        // the program stays queued until a Restore decision.
        (ProgramStatus::Paused { .. }, ProgramEvent::ToolResultReady { result_tokens })
            if program.phase == ProgramPhase::Acting =>
        {
            next.context_tokens += result_tokens;
            next.total_tokens += result_tokens;
            next.phase = ProgramPhase::Reasoning;
            next.current_call = None;
        }
        (ProgramStatus::Reasoning | ProgramStatus::Acting { .. }, ProgramEvent::PauseRequested) => {
            next.status = ProgramStatus::Paused { paused_since: now };
            next.placement = None;
        }
        (ProgramStatus::Paused { .. }, ProgramEvent::RestoreGranted { backend }) => {
            next.placement = Some(*backend);
            next.status = match program.phase {
                ProgramPhase::Reasoning => ProgramStatus::Reasoning,
                // Resuming an Acting program keeps the original call age so
                // the decay check keeps discounting from the issue tick.
                ProgramPhase::Acting => ProgramStatus::Acting {
                    acting_since: program
                        .current_call
                        .map(|c| c.issued_at)
                        .unwrap_or(now),
                },
            };
        }
        (
            ProgramStatus::Reasoning | ProgramStatus::Acting { .. } | ProgramStatus::Paused { .. },
            ProgramEvent::ReleaseRequested,
        ) => {
            next.status = ProgramStatus::Stopped;
            next.placement = None;
            next.current_call = None;
        }
        _ => return Err(program.illegal(event)),
    }
    debug_assert_eq!(
        next.placement.is_some(),
        next.status.is_live(),
        "placement must be nonempty iff status is live"
    );
    Ok(next)
}

/// In-memory program table. Single source of truth for program metadata;
/// the engine is the single writer.
#[derive(Debug, Default, Clone)]
pub struct ProgramRegistry {
    programs: BTreeMap<ProgramId, AgentProgram>,
}

impl ProgramRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_program(
        &mut self,
        id: ProgramId,
        prompt_tokens: Tokens,
        requested_profiles: Vec<String>,
        now: Tick,
    ) -> Result<&AgentProgram, ProgramError> {
        if self.programs.contains_key(&id) {
            return Err(ProgramError::DuplicateId(id));
        }
        let program = AgentProgram::new(id.clone(), prompt_tokens, requested_profiles, now);
        Ok(self.programs.entry(id).or_insert(program))
    }

    pub fn apply(
        &mut self,
        id: &ProgramId,
        event: &ProgramEvent,
        now: Tick,
    ) -> Result<&AgentProgram, ProgramError> {
        let program = self
            .programs
            .get(id)
            .ok_or_else(|| ProgramError::UnknownProgram(id.clone()))?;
        let next = apply_event(program, event, now)?;
        let slot = self.programs.get_mut(id).expect("checked above");
        *slot = next;
        Ok(slot)
    }

    pub fn get(&self, id: &ProgramId) -> Result<&AgentProgram, ProgramError> {
        self.programs
            .get(id)
            .ok_or_else(|| ProgramError::UnknownProgram(id.clone()))
    }

    pub fn get_mut(&mut self, id: &ProgramId) -> Option<&mut AgentProgram> {
        self.programs.get_mut(id)
    }

    pub fn contains(&self, id: &ProgramId) -> bool {
        self.programs.contains_key(id)
    }

    /// Deterministic iteration in id order.
    pub fn iter(&self) -> impl Iterator<Item = &AgentProgram> {
        self.programs.values()
    }

    pub fn placed_on(&self, backend: BackendId) -> Vec<&AgentProgram> {
        self.programs
            .values()
            .filter(|p| p.placement == Some(backend))
            .collect()
    }

    pub fn paused(&self) -> Vec<&AgentProgram> {
        self.programs
            .values()
            .filter(|p| p.status.is_paused())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.programs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.programs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn pid(s: &str) -> ProgramId {
        ProgramId::new(s)
    }

    #[test]
    fn create_enters_paused_with_prompt_context() {
        let mut reg = ProgramRegistry::new();
        let p = reg
            .create_program(pid("p1"), 512, vec!["docker:repoA".into()], 0)
            .unwrap();
        assert_eq!(p.context_tokens, 512);
        assert_eq!(p.status, ProgramStatus::Paused { paused_since: 0 });
        assert_eq!(p.placement, None);
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut reg = ProgramRegistry::new();
        reg.create_program(pid("p1"), 512, vec![], 0).unwrap();
        let err = reg.create_program(pid("p1"), 10, vec![], 1).unwrap_err();
        assert_eq!(err, ProgramError::DuplicateId(pid("p1")));
    }

    #[test]
    fn empty_prompt_program_is_legal() {
        let mut reg = ProgramRegistry::new();
        let p = reg.create_program(pid("p2"), 0, vec![], 0).unwrap();
        assert_eq!(p.context_tokens, 0);
        assert!(p.status.is_paused());
    }

    #[test]
    fn decode_extends_context() {
        let mut p = AgentProgram::new(pid("p"), 100, vec![], 0);
        p.status = ProgramStatus::Reasoning;
        p.placement = Some(BackendId(0));
        let p = apply_event(&p, &ProgramEvent::TokensDecoded { count: 50 }, 3).unwrap();
        assert_eq!(p.context_tokens, 150);
        assert_eq!(p.total_tokens, 150);
        assert_eq!(p.status, ProgramStatus::Reasoning);
    }

    #[test]
    fn tool_result_returns_to_reasoning() {
        let mut p = AgentProgram::new(pid("p"), 100, vec![], 0);
        p.status = ProgramStatus::Reasoning;
        p.placement = Some(BackendId(0));
        let p = apply_event(&p, &ProgramEvent::ToolCallIssued { env: EnvId(1) }, 5).unwrap();
        assert_eq!(p.status, ProgramStatus::Acting { acting_since: 5 });
        assert_eq!(p.phase, ProgramPhase::Acting);
        assert_eq!(p.step_count, 1);
        let p = apply_event(&p, &ProgramEvent::ToolResultReady { result_tokens: 30 }, 9).unwrap();
        assert_eq!(p.context_tokens, 130);
        assert_eq!(p.phase, ProgramPhase::Reasoning);
        assert_eq!(p.status, ProgramStatus::Reasoning);
        assert!(p.current_call.is_none());
    }

    #[test]
    fn decode_on_stopped_is_illegal() {
        let mut p = AgentProgram::new(pid("p"), 10, vec![], 0);
        p.status = ProgramStatus::Stopped;
        let err = apply_event(&p, &ProgramEvent::TokensDecoded { count: 1 }, 1).unwrap_err();
        assert!(matches!(err, ProgramError::IllegalTransition { .. }));
    }

    #[test]
    fn release_is_terminal() {
        let mut p = AgentProgram::new(pid("p"), 10, vec![], 0);
        let released = apply_event(&p, &ProgramEvent::ReleaseRequested, 2).unwrap();
        assert_eq!(released.status, ProgramStatus::Stopped);
        assert_eq!(released.placement, None);
        let err = apply_event(&released, &ProgramEvent::ReleaseRequested, 3).unwrap_err();
        assert!(matches!(err, ProgramError::IllegalTransition { .. }));
        p.status = ProgramStatus::Stopped;
    }

    #[test]
    fn result_while_paused_flips_phase_but_stays_queued() {
        let mut p = AgentProgram::new(pid("p"), 100, vec![], 0);
        p.status = ProgramStatus::Reasoning;
        p.placement = Some(BackendId(1));
        let p = apply_event(&p, &ProgramEvent::ToolCallIssued { env: EnvId(7) }, 4).unwrap();
        let p = apply_event(&p, &ProgramEvent::PauseRequested, 6).unwrap();
        assert_eq!(p.status, ProgramStatus::Paused { paused_since: 6 });
        assert_eq!(p.phase, ProgramPhase::Acting);
        let p = apply_event(&p, &ProgramEvent::ToolResultReady { result_tokens: 40 }, 8).unwrap();
        assert!(p.status.is_paused());
        assert_eq!(p.phase, ProgramPhase::Reasoning);
        assert_eq!(p.context_tokens, 140);
        // Restore resumes the post-result phase.
        let p = apply_event(
            &p,
            &ProgramEvent::RestoreGranted {
                backend: BackendId(0),
            },
            10,
        )
        .unwrap();
        assert_eq!(p.status, ProgramStatus::Reasoning);
        assert_eq!(p.placement, Some(BackendId(0)));
    }

    #[test]
    fn restore_of_acting_program_keeps_call_age() {
        let mut p = AgentProgram::new(pid("p"), 100, vec![], 0);
        p.status = ProgramStatus::Reasoning;
        p.placement = Some(BackendId(1));
        let p = apply_event(&p, &ProgramEvent::ToolCallIssued { env: EnvId(7) }, 4).unwrap();
        let p = apply_event(&p, &ProgramEvent::PauseRequested, 6).unwrap();
        let p = apply_event(
            &p,
            &ProgramEvent::RestoreGranted {
                backend: BackendId(0),
            },
            12,
        )
        .unwrap();
        assert_eq!(p.status, ProgramStatus::Acting { acting_since: 4 });
    }

    /// Conservation: context equals prompt plus the sum of all decoded and
    /// result tokens, for any legal random event sequence.
    #[test]
    fn random_walk_conserves_tokens_and_replays_identically() {
        for seed in 0..20 {
            let mut rng = StdRng::seed_from_u64(seed);
            let prompt = rng.gen_range(0..1000);
            let mut events: Vec<(ProgramEvent, Tick)> = Vec::new();
            let mut p = AgentProgram::new(pid("p"), prompt, vec![], 0);
            // Start it like the engine would.
            let restore = ProgramEvent::RestoreGranted {
                backend: BackendId(0),
            };
            p = apply_event(&p, &restore, 1).unwrap();
            events.push((restore, 1));
            let mut fed: Tokens = 0;
            let mut now = 2;
            for _ in 0..200 {
                let ev = match p.status {
                    ProgramStatus::Reasoning => {
                        if rng.gen_bool(0.7) {
                            let n = rng.gen_range(0..50);
                            fed += n;
                            ProgramEvent::TokensDecoded { count: n }
                        } else if rng.gen_bool(0.5) {
                            ProgramEvent::ToolCallIssued {
                                env: EnvId(rng.gen_range(0..5)),
                            }
                        } else {
                            ProgramEvent::PauseRequested
                        }
                    }
                    ProgramStatus::Acting { .. } => {
                        if rng.gen_bool(0.6) {
                            let n = rng.gen_range(0..80);
                            fed += n;
                            ProgramEvent::ToolResultReady { result_tokens: n }
                        } else {
                            ProgramEvent::PauseRequested
                        }
                    }
                    ProgramStatus::Paused { .. } => {
                        if p.phase == ProgramPhase::Acting && rng.gen_bool(0.4) {
                            let n = rng.gen_range(0..80);
                            fed += n;
                            ProgramEvent::ToolResultReady { result_tokens: n }
                        } else {
                            ProgramEvent::RestoreGranted {
                                backend: BackendId(rng.gen_range(0..3)),
                            }
                        }
                    }
                    ProgramStatus::Stopped => break,
                };
                p = apply_event(&p, &ev, now).unwrap();
                events.push((ev, now));
                // Paused/Stopped never hold a placement.
                if !p.status.is_live() {
                    assert_eq!(p.placement, None);
                }
                now += 1;
            }
            assert_eq!(p.context_tokens, prompt + fed, "conservation (seed {seed})");
            assert_eq!(p.total_tokens, p.context_tokens);

            // Replay must be bit-identical.
            let mut replatest = AgentProgram::new(pid("p"), prompt, vec![], 0);
            for (ev, at) in &events {
                replatest = apply_event(&replatest, ev, *at).unwrap();
            }
            assert_eq!(replatest, p, "replay mismatch (seed {seed})");
        }
    }

    #[test]
    fn context_is_monotone_under_any_event() {
        let mut p = AgentProgram::new(pid("p"), 10, vec![], 0);
        p.status = ProgramStatus::Reasoning;
        p.placement = Some(BackendId(0));
        let before = p.context_tokens;
        for ev in [
            ProgramEvent::TokensDecoded { count: 3 },
            ProgramEvent::ToolCallIssued { env: EnvId(0) },
            ProgramEvent::ToolResultReady { result_tokens: 4 },
            ProgramEvent::PauseRequested,
        ] {
            if let Ok(next) = apply_event(&p, &ev, 1) {
                assert!(next.context_tokens >= before);
                p = next;
            }
        }
    }
}
