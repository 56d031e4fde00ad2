//! Shared identifier and unit types.
//!
//! All time is measured in discrete simulation ticks and all memory in
//! KV-cache tokens. Cost accounting multiplies the two into token·ticks,
//! which stays in exact integer arithmetic end to end.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Discrete simulation time.
pub type Tick = u64;

/// KV-cache size, always counted in tokens.
pub type Tokens = u64;

/// Space-time product unit: tokens held for some number of ticks.
pub type TokenTicks = u64;

/// Unique identifier of an agentic program. Never reused after release.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProgramId(pub String);

impl ProgramId {
    pub fn new(id: impl Into<String>) -> Self {
        ProgramId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ProgramId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ProgramId {
    fn from(s: &str) -> Self {
        ProgramId(s.to_string())
    }
}

/// Index of a simulated data-parallel inference replica.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct BackendId(pub u32);

impl BackendId {
    /// Endpoint form used by gateway snapshots and the `backend_url`
    /// projection field.
    pub fn url(&self) -> String {
        format!("sim://backend/{}", self.0)
    }
}

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Unique identifier of a tool execution environment.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct EnvId(pub u64);

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "env-{}", self.0)
    }
}
