//! Program-aware scheduling engine for multi-turn agentic LLM inference,
//! on a deterministic discrete-event cluster simulator.
//!
//! Whole agent workflows are tracked as first-class programs (identity,
//! context size, tool set, placement, phase, status). A periodic monitor
//! detects KV-pool pressure per replica, pauses the cheapest Acting programs
//! (shortest context first), and restores queued programs score-ordered from
//! a single global waiting queue onto the least-loaded replica. Tool
//! environments are garbage-collected on program termination and prepared
//! asynchronously while their programs wait for admission. Every token·tick
//! of memory use is accounted into a five-way cost decomposition (decode,
//! prefill, recompute, unused, caching).
//!
//! The crate is organized by subsystem:
//! - [`program`]: the program abstraction and lifecycle state machine.
//! - [`scheduler`]: decay functions, watermarks, eviction selection and the
//!   global waiting queue.
//! - [`ledger`]: space-time-product cost accounting and derived metrics.
//! - [`sim`]: simulated backends, the engine loop and baseline policies.
//! - [`tools`]: tool-environment lifecycle, resource pools and latency
//!   samplers.
//! - [`gateway`]: the program-tagged service surface.
//! - [`workload`]: reproducible trace generation.
//! - [`config`]: TOML-backed engine configuration.

pub mod config;
pub mod gateway;
pub mod ledger;
pub mod program;
pub mod scheduler;
pub mod sim;
pub mod tools;
pub mod types;
pub mod workload;

pub use config::EngineConfig;
pub use gateway::{Accepted, BackendSnapshot, GatewayError};
pub use ledger::{CostComponent, CostLedger, MetricsReport, StpSample};
pub use program::{AgentProgram, ProgramEvent, ProgramPhase, ProgramRegistry, ProgramStatus};
pub use scheduler::{DecaySpec, GlobalWaitQueue, ScheduleDecision, SchedulerConfig};
pub use sim::{run_policy, Engine, PolicyKind, RunOutput};
pub use tools::{EnvProfile, LatencySampler, ToolEnvironment, ToolManager};
pub use types::{BackendId, EnvId, ProgramId, Tick, Tokens};
pub use workload::{generate_trace, ArrivalModel, WorkloadTrace};
