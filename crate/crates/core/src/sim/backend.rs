//! One simulated data-parallel replica: a KV token pool, a chunked prefill
//! queue and a decode set.
//!
//! The backend only owns cache state; program lifecycle and cost attribution
//! stay in the engine. The hard physical bound `Σ resident ≤ capacity` is
//! enforced here by construction: growth requests are clipped to free space.

use super::SimError;
use crate::types::{BackendId, ProgramId, Tick, Tokens};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// A queued (re)prefill job. `remaining_recompute` rebuilds previously
/// materialized history (thrashing cost); `remaining_new` computes genuinely
/// new tokens. Recompute runs first: it restores the prefix the new tokens
/// extend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefillJob {
    pub program: ProgramId,
    pub remaining_recompute: Tokens,
    pub remaining_new: Tokens,
}

impl PrefillJob {
    pub fn remaining(&self) -> Tokens {
        self.remaining_recompute + self.remaining_new
    }
}

/// Outcome of admitting a program onto a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResumeOutcome {
    /// `cached` historical tokens were still resident; only `new_tokens`
    /// need prefill.
    Hit { cached: Tokens, new_tokens: Tokens },
    /// Node-local cache was gone: `recompute` historical tokens must be
    /// rebuilt besides the `new_tokens`.
    Miss {
        recompute: Tokens,
        new_tokens: Tokens,
    },
    /// A prefill job was already queued; it absorbed the additional tokens.
    Extended { added_new: Tokens },
}

/// What one tick of prefill work did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefillProgress {
    pub program: ProgramId,
    pub grew: Tokens,
    pub recompute_part: Tokens,
    pub new_part: Tokens,
    pub resident_after: Tokens,
    pub finished: bool,
    /// Zero free space blocked the head job this tick.
    pub stalled: bool,
}

#[derive(Debug, Clone)]
pub struct SimBackend {
    pub id: BackendId,
    pub capacity_tokens: Tokens,
    pub healthy: bool,
    resident: BTreeMap<ProgramId, Tokens>,
    pub prefill_queue: VecDeque<PrefillJob>,
    /// Programs eligible to emit one token per tick; maintained by the
    /// engine (status Reasoning, prefill drained, emission pending).
    pub decoding: BTreeSet<ProgramId>,
    /// Touch times for recency-based baseline eviction.
    pub last_use: BTreeMap<ProgramId, Tick>,
    /// TTL pins (TtlPin baseline): cache not evictable until the tick.
    pub pinned_until: BTreeMap<ProgramId, Tick>,
}

impl SimBackend {
    pub fn new(id: BackendId, capacity_tokens: Tokens) -> Self {
        SimBackend {
            id,
            capacity_tokens,
            healthy: true,
            resident: BTreeMap::new(),
            prefill_queue: VecDeque::new(),
            decoding: BTreeSet::new(),
            last_use: BTreeMap::new(),
            pinned_until: BTreeMap::new(),
        }
    }

    pub fn resident_total(&self) -> Tokens {
        self.resident.values().sum()
    }

    pub fn free_physical(&self) -> Tokens {
        self.capacity_tokens - self.resident_total()
    }

    pub fn resident_of(&self, program: &ProgramId) -> Option<Tokens> {
        self.resident.get(program).copied()
    }

    pub fn is_resident(&self, program: &ProgramId) -> bool {
        self.resident.contains_key(program)
    }

    pub fn resident_programs(&self) -> impl Iterator<Item = (&ProgramId, &Tokens)> {
        self.resident.iter()
    }

    pub fn has_prefill(&self, program: &ProgramId) -> bool {
        self.prefill_queue.iter().any(|j| &j.program == program)
    }

    pub fn touch(&mut self, program: &ProgramId, now: Tick) {
        self.last_use.insert(program.clone(), now);
    }

    /// Admits a program whose scheduler-side capacity check already passed.
    /// Returns what kind of resume this is; the engine records the
    /// hit/miss accounting and keeps `materialized` monotone.
    pub fn admit(
        &mut self,
        program: &ProgramId,
        context_tokens: Tokens,
        materialized: Tokens,
        now: Tick,
    ) -> Result<ResumeOutcome, SimError> {
        if self.decoding.contains(program) {
            return Err(SimError::AlreadyResident(program.clone()));
        }
        self.touch(program, now);
        let covered: Tokens = self.resident_of(program).unwrap_or(0)
            + self
                .prefill_queue
                .iter()
                .filter(|j| &j.program == program)
                .map(|j| j.remaining())
                .sum::<Tokens>();
        if self.has_prefill(program) {
            // Already rebuilding: extend the queued job with the new tokens.
            let added = context_tokens.saturating_sub(covered);
            if added > 0 {
                let job = self
                    .prefill_queue
                    .iter_mut()
                    .find(|j| &j.program == program)
                    .expect("has_prefill checked");
                job.remaining_new += added;
            }
            return Ok(ResumeOutcome::Extended { added_new: added });
        }
        match self.resident_of(program) {
            Some(cached) => {
                let new_tokens = context_tokens.saturating_sub(cached);
                if new_tokens > 0 {
                    self.prefill_queue.push_back(PrefillJob {
                        program: program.clone(),
                        remaining_recompute: 0,
                        remaining_new: new_tokens,
                    });
                }
                Ok(ResumeOutcome::Hit { cached, new_tokens })
            }
            None => {
                self.resident.insert(program.clone(), 0);
                let recompute = materialized.min(context_tokens);
                let new_tokens = context_tokens - recompute;
                if recompute + new_tokens > 0 {
                    self.prefill_queue.push_back(PrefillJob {
                        program: program.clone(),
                        remaining_recompute: recompute,
                        remaining_new: new_tokens,
                    });
                }
                Ok(ResumeOutcome::Miss {
                    recompute,
                    new_tokens,
                })
            }
        }
    }

    /// Drops a program's cache entry and cancels any queued prefill job.
    /// Returns the freed tokens and the cancelled job, if one was in flight.
    pub fn evict(&mut self, program: &ProgramId) -> Result<(Tokens, Option<PrefillJob>), SimError> {
        let freed = self
            .resident
            .remove(program)
            .ok_or_else(|| SimError::NotResident(program.clone()))?;
        self.decoding.remove(program);
        self.last_use.remove(program);
        self.pinned_until.remove(program);
        let cancelled = self
            .prefill_queue
            .iter()
            .position(|j| &j.program == program)
            .map(|idx| self.prefill_queue.remove(idx).expect("index valid"));
        Ok((freed, cancelled))
    }

    /// Runs the head prefill job for one tick: up to `chunk` tokens, clipped
    /// to free pool space. Recompute tokens drain before new tokens.
    pub fn advance_prefill(&mut self, chunk: Tokens, now: Tick) -> Option<PrefillProgress> {
        let resident_total: Tokens = self.resident.values().sum();
        let job = self.prefill_queue.front_mut()?;
        let program = job.program.clone();
        let want = chunk.min(job.remaining());
        let free = self.capacity_tokens - resident_total;
        let grow = want.min(free);
        if grow == 0 {
            let resident_after = self.resident.get(&program).copied().unwrap_or(0);
            return Some(PrefillProgress {
                program,
                grew: 0,
                recompute_part: 0,
                new_part: 0,
                resident_after,
                finished: false,
                stalled: true,
            });
        }
        let recompute_part = grow.min(job.remaining_recompute);
        let new_part = grow - recompute_part;
        job.remaining_recompute -= recompute_part;
        job.remaining_new -= new_part;
        let finished = job.remaining() == 0;
        let entry = self.resident.entry(program.clone()).or_insert(0);
        *entry += grow;
        let resident_after = *entry;
        if finished {
            self.prefill_queue.pop_front();
        }
        self.last_use.insert(program.clone(), now);
        Some(PrefillProgress {
            program,
            grew: grow,
            recompute_part,
            new_part,
            resident_after,
            finished,
            stalled: false,
        })
    }

    /// Grows one decoding program by one token; `None` when the pool is
    /// physically full (decode stalls rather than overflow).
    pub fn grow_decode(&mut self, program: &ProgramId, now: Tick) -> Option<Tokens> {
        if self.free_physical() == 0 {
            return None;
        }
        let entry = self.resident.get_mut(program)?;
        *entry += 1;
        let after = *entry;
        self.last_use.insert(program.clone(), now);
        Some(after)
    }

    pub fn assert_pool_bound(&self) {
        assert!(
            self.resident_total() <= self.capacity_tokens,
            "physical pool bound violated on backend {}",
            self.id
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(s: &str) -> ProgramId {
        ProgramId::new(s)
    }

    #[test]
    fn prefill_job_completes_in_remaining_over_chunk_ticks() {
        let mut b = SimBackend::new(BackendId(0), 1000);
        b.admit(&pid("p"), 8, 0, 0).unwrap();
        let mut ticks = 0;
        loop {
            let progress = b.advance_prefill(2, ticks).unwrap();
            ticks += 1;
            if progress.finished {
                break;
            }
        }
        assert_eq!(ticks, 4);
        assert_eq!(b.resident_of(&pid("p")), Some(8));
    }

    #[test]
    fn full_recompute_staircase_matches_cost_oracle() {
        let mut b = SimBackend::new(BackendId(0), 1000);
        // Fully evicted context of 8 tokens resuming at chunk 2.
        b.admit(&pid("p"), 8, 8, 0).unwrap();
        let mut charged = Vec::new();
        loop {
            let progress = b.advance_prefill(2, 0).unwrap();
            assert!(progress.recompute_part > 0);
            charged.push(progress.resident_after);
            if progress.finished {
                break;
            }
        }
        assert_eq!(charged, vec![2, 4, 6, 8]);
        assert_eq!(charged.iter().sum::<u64>(), 20);
    }

    #[test]
    fn admit_hit_schedules_incremental_prefill_only() {
        let mut b = SimBackend::new(BackendId(0), 1000);
        b.admit(&pid("p"), 180, 0, 0).unwrap();
        while !matches!(
            b.advance_prefill(64, 0),
            Some(PrefillProgress { finished: true, .. })
        ) {}
        // Resident 180 of c=200: prefill 20, hit credits 180.
        let outcome = b.admit(&pid("p"), 200, 180, 1).unwrap();
        assert_eq!(
            outcome,
            ResumeOutcome::Hit {
                cached: 180,
                new_tokens: 20
            }
        );
    }

    #[test]
    fn admit_miss_recomputes_history() {
        let mut b = SimBackend::new(BackendId(0), 1000);
        let outcome = b.admit(&pid("p"), 200, 200, 0).unwrap();
        assert_eq!(
            outcome,
            ResumeOutcome::Miss {
                recompute: 200,
                new_tokens: 0
            }
        );
    }

    #[test]
    fn cross_backend_admission_is_a_miss() {
        let mut a = SimBackend::new(BackendId(0), 1000);
        let mut b = SimBackend::new(BackendId(1), 1000);
        a.admit(&pid("p"), 100, 0, 0).unwrap();
        while !matches!(
            a.advance_prefill(64, 0),
            Some(PrefillProgress { finished: true, .. })
        ) {}
        // Cache is node-local: backend B has nothing.
        let outcome = b.admit(&pid("p"), 100, 100, 5).unwrap();
        assert_eq!(
            outcome,
            ResumeOutcome::Miss {
                recompute: 100,
                new_tokens: 0
            }
        );
    }

    #[test]
    fn evict_frees_everything_once() {
        let mut b = SimBackend::new(BackendId(0), 1000);
        b.admit(&pid("p"), 500, 0, 0).unwrap();
        while !matches!(
            b.advance_prefill(64, 0),
            Some(PrefillProgress { finished: true, .. })
        ) {}
        let (freed, cancelled) = b.evict(&pid("p")).unwrap();
        assert_eq!(freed, 500);
        assert!(cancelled.is_none());
        assert_eq!(
            b.evict(&pid("p")).unwrap_err(),
            SimError::NotResident(pid("p"))
        );
    }

    #[test]
    fn evict_mid_prefill_cancels_job_and_leaves_no_residue() {
        let mut b = SimBackend::new(BackendId(0), 1000);
        b.admit(&pid("p"), 100, 100, 0).unwrap();
        b.advance_prefill(16, 0).unwrap();
        b.advance_prefill(16, 1).unwrap();
        let (freed, cancelled) = b.evict(&pid("p")).unwrap();
        assert_eq!(freed, 32);
        let job = cancelled.unwrap();
        assert_eq!(job.remaining(), 68);
        assert!(!b.is_resident(&pid("p")));
        assert!(!b.has_prefill(&pid("p")));
        assert_eq!(b.resident_total(), 0);
    }

    #[test]
    fn admit_while_decoding_is_already_resident() {
        let mut b = SimBackend::new(BackendId(0), 1000);
        b.admit(&pid("p"), 10, 0, 0).unwrap();
        while !matches!(
            b.advance_prefill(64, 0),
            Some(PrefillProgress { finished: true, .. })
        ) {}
        b.decoding.insert(pid("p"));
        assert_eq!(
            b.admit(&pid("p"), 12, 10, 1).unwrap_err(),
            SimError::AlreadyResident(pid("p"))
        );
    }

    #[test]
    fn pool_never_overflows_under_pressure() {
        let mut b = SimBackend::new(BackendId(0), 100);
        b.admit(&pid("a"), 90, 0, 0).unwrap();
        while !matches!(
            b.advance_prefill(64, 0),
            Some(PrefillProgress { finished: true, .. })
        ) {}
        b.admit(&pid("b"), 50, 0, 0).unwrap();
        // Only 10 tokens of space: prefill grows 10 then stalls.
        let p = b.advance_prefill(64, 1).unwrap();
        assert_eq!(p.grew, 10);
        let p = b.advance_prefill(64, 2).unwrap();
        assert!(p.stalled);
        b.assert_pool_bound();
        // Decode also refuses to overflow.
        b.decoding.insert(pid("a"));
        assert_eq!(b.grow_decode(&pid("a"), 3), None);
    }

    #[test]
    fn admit_extends_inflight_job() {
        let mut b = SimBackend::new(BackendId(0), 1000);
        b.admit(&pid("p"), 100, 100, 0).unwrap();
        b.advance_prefill(16, 0).unwrap();
        let outcome = b.admit(&pid("p"), 140, 100, 1).unwrap();
        assert_eq!(outcome, ResumeOutcome::Extended { added_new: 40 });
        let job = b.prefill_queue.front().unwrap();
        assert_eq!(job.remaining(), 124);
    }
}
