//! Deterministic discrete-event simulation of data-parallel inference
//! replicas, plus the engine loop that drives programs, tools and the
//! scheduler, and the baseline policies used for comparison experiments.

pub mod backend;
pub mod engine;
pub mod policy;

pub use backend::{PrefillJob, ResumeOutcome, SimBackend};
pub use engine::{run_policy, Engine, EngineMode, RunOutput, RunStats};
pub use policy::{PolicyKind, TtlPredictor};

use crate::types::{BackendId, ProgramId, Tick};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("program {0} already resident and decoding on this backend")]
    AlreadyResident(ProgramId),
    #[error("program {0} not resident")]
    NotResident(ProgramId),
    #[error("inconsistent configuration: {0}")]
    ConfigError(String),
    #[error("simulation made no progress at tick {0}")]
    NoProgress(Tick),
}

/// One line of the exported event log. Serialized as newline-delimited JSON
/// with a fixed field order, so identical runs produce byte-identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub tick: Tick,
    pub event: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub program: Option<ProgramId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendId>,
    pub tokens: u64,
}

impl EventRecord {
    pub fn to_ndjson_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

pub fn events_to_ndjson(events: &[EventRecord]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_ndjson_line());
        out.push('\n');
    }
    out
}

pub mod event_names {
    pub const PROGRAM_CREATED: &str = "program_created";
    pub const RESTORED: &str = "restored";
    pub const PAUSED: &str = "paused";
    pub const RELEASED: &str = "released";
    pub const ADMITTED: &str = "admitted";
    pub const RESUME_HIT: &str = "resume_hit";
    pub const RESUME_MISS: &str = "resume_miss";
    pub const EVICTION: &str = "eviction";
    pub const PREFILL_DONE: &str = "prefill_done";
    pub const STEP_EMISSION_COMPLETE: &str = "step_emission_complete";
    pub const TOOL_STARTED: &str = "tool_started";
    pub const TOOL_COMPLETED: &str = "tool_completed";
    pub const TOOL_CANCELLED: &str = "tool_cancelled";
    pub const ENV_ACQUIRED: &str = "env_acquired";
    pub const ENV_READY: &str = "env_ready";
    pub const ENV_RELEASED: &str = "env_released";
    pub const DECODE_STALL: &str = "decode_stall";
    pub const FORCED_EVICTION: &str = "forced_eviction";
    pub const RESOURCE_EXHAUSTED: &str = "resource_exhausted";
    pub const UNHEALTHY_PAUSE: &str = "unhealthy_pause";
}
