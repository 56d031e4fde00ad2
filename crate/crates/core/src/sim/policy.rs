//! Scheduling policies driven by the engine.
//!
//! All four policies speak the same decision vocabulary (admit / pause /
//! evict) and feed the same event and cost streams, so their reports are
//! directly comparable:
//!
//! - `ProgramAware`: the global-queue scheduler (watermarks, decay,
//!   shortest-first Acting-tier pauses, score-ordered restores).
//! - `RequestAware`: stateless request-level serving. Admits every arrival,
//!   holds no reservations across turns, and evicts idle caches by recency
//!   under pressure — the thrashing baseline.
//! - `TtlPin`: request-level admission plus TTL pinning of Acting caches
//!   for a predicted tool duration; evicts on expiry or decode pressure.
//! - `PinnedRouting`: the program-aware mechanics with per-replica queues —
//!   every program is permanently bound to its home backend.

use crate::types::Tick;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Tool-duration predictor for the TTL baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TtlPredictor {
    Constant { ticks: Tick },
    /// Mean of the last `window` observed tool durations. On heavy-tailed
    /// workloads the mean sits far above the median, so this predictor
    /// systematically overestimates the typical call.
    LaggedMean { window: usize },
}

impl Default for TtlPredictor {
    fn default() -> Self {
        TtlPredictor::LaggedMean { window: 32 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TtlEstimator {
    history: VecDeque<Tick>,
    predictor: TtlPredictor,
}

impl TtlEstimator {
    pub fn new(predictor: TtlPredictor) -> Self {
        TtlEstimator {
            history: VecDeque::new(),
            predictor,
        }
    }

    pub fn observe(&mut self, duration: Tick) {
        if let TtlPredictor::LaggedMean { window } = self.predictor {
            self.history.push_back(duration);
            while self.history.len() > window {
                self.history.pop_front();
            }
        }
    }

    pub fn predict(&self) -> Tick {
        match self.predictor {
            TtlPredictor::Constant { ticks } => ticks.max(1),
            TtlPredictor::LaggedMean { .. } => {
                if self.history.is_empty() {
                    8
                } else {
                    let sum: u64 = self.history.iter().sum();
                    (sum as f64 / self.history.len() as f64).ceil() as Tick
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    ProgramAware,
    RequestAware,
    TtlPin {
        #[serde(default)]
        predictor: TtlPredictor,
    },
    PinnedRouting,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::ProgramAware => "program-aware",
            PolicyKind::RequestAware => "request-aware",
            PolicyKind::TtlPin { .. } => "ttl-pin",
            PolicyKind::PinnedRouting => "pinned-routing",
        }
    }

    pub fn parse(s: &str) -> Option<PolicyKind> {
        match s {
            "program-aware" => Some(PolicyKind::ProgramAware),
            "request-aware" => Some(PolicyKind::RequestAware),
            "ttl-pin" => Some(PolicyKind::TtlPin {
                predictor: TtlPredictor::default(),
            }),
            "pinned-routing" => Some(PolicyKind::PinnedRouting),
            _ => None,
        }
    }

    /// Global-queue policies pause programs back into a shared (or home)
    /// queue; request-level policies admit unconditionally and evict caches
    /// in place.
    pub fn uses_waiting_queue(&self) -> bool {
        matches!(self, PolicyKind::ProgramAware | PolicyKind::PinnedRouting)
    }

    /// Asynchronous environment preparation ships with the program-aware
    /// system; request-level baselines prepare environments on first use.
    pub fn default_async_prep(&self) -> bool {
        self.uses_waiting_queue()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lagged_mean_tracks_tail_heavy_history() {
        let mut est = TtlEstimator::new(TtlPredictor::LaggedMean { window: 4 });
        assert_eq!(est.predict(), 8);
        for d in [2, 2, 2, 400] {
            est.observe(d);
        }
        // Mean dragged far above the median draw.
        assert_eq!(est.predict(), 102);
        est.observe(2);
        assert_eq!(est.predict(), 102); // window slid: 2,2,400,2
    }

    #[test]
    fn constant_predictor_ignores_history() {
        let mut est = TtlEstimator::new(TtlPredictor::Constant { ticks: 25 });
        est.observe(1000);
        assert_eq!(est.predict(), 25);
    }

    #[test]
    fn policy_names_roundtrip() {
        for name in ["program-aware", "request-aware", "ttl-pin", "pinned-routing"] {
            assert_eq!(PolicyKind::parse(name).unwrap().name(), name);
        }
        assert!(PolicyKind::parse("bogus").is_none());
    }
}
