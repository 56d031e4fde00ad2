//! The engine's service surface.
//!
//! Clients need exactly three changes to run through the engine: attach a
//! `program_id` to chat-completion requests, attach it to tool executions,
//! and POST an explicit release when the workflow ends. Everything else in
//! the request passes through to the backend untouched.
//!
//! Endpoints (JSON bodies, wired over HTTP by the CLI's `serve` command):
//! - `POST /v1/chat/completions` — completion-style body whose extra
//!   `program_id` key the gateway consumes.
//! - `POST /tools/run` — `{command, sandbox, program_id}`.
//! - `POST /programs/release` — `{program_id}`.
//! - `GET /metrics` — current metrics report.
//! - `GET /programs/{id}` — program state projection.

use crate::program::{AgentProgram, ProgramStatus};
use crate::sim::engine::{Engine, ParkedChat, ParkedTool};
use crate::sim::SimError;
use crate::types::{BackendId, ProgramId, Tick, Tokens};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("request body must carry a nonempty program_id extra key")]
    MissingProgramId,
    #[error("program {0} was released; replays are rejected")]
    ProgramStopped(ProgramId),
    #[error("unknown program {0}")]
    UnknownProgram(ProgramId),
    #[error("backend unhealthy; request re-parked")]
    BackendUnhealthy,
    #[error("program {0} already has a request in flight")]
    RequestInFlight(ProgramId),
    #[error("tool resources exhausted; retry later")]
    ResourceExhausted,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("engine error: {0}")]
    Engine(String),
}

impl GatewayError {
    /// Machine-readable code carried in error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::MissingProgramId => "missing_program_id",
            GatewayError::ProgramStopped(_) => "program_stopped",
            GatewayError::UnknownProgram(_) => "unknown_program",
            GatewayError::BackendUnhealthy => "backend_unhealthy",
            GatewayError::RequestInFlight(_) => "request_in_flight",
            GatewayError::ResourceExhausted => "resource_exhausted",
            GatewayError::Malformed(_) => "malformed_request",
            GatewayError::Engine(_) => "engine_error",
        }
    }

    pub fn to_body(&self) -> Value {
        json!({ "error": { "code": self.code(), "message": self.to_string() } })
    }
}

impl From<SimError> for GatewayError {
    fn from(e: SimError) -> Self {
        GatewayError::Engine(e.to_string())
    }
}

/// Outcome of an accepted request: responses are produced by simulation
/// ticks, so accepted work parks under a ticket until the engine delivers.
#[derive(Debug, Clone, PartialEq)]
pub enum Accepted {
    Parked { ticket: u64 },
    Immediate(Value),
}

/// Point-in-time view of one backend, fed to the scheduler each poll.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSnapshot {
    pub url: String,
    pub backend: BackendId,
    pub healthy: bool,
    pub cache_config: Option<CacheConfig>,
    pub active_program_tokens: Tokens,
    pub taken_at: Tick,
}

/// Static cache configuration, fetched once at startup in a real
/// deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity_tokens: Tokens,
    pub chunk: Tokens,
}

/// Drops snapshots older than `delta_t`: the scheduler never acts on stale
/// state.
pub fn fresh_snapshots(
    snapshots: Vec<BackendSnapshot>,
    now: Tick,
    delta_t: Tick,
) -> Vec<BackendSnapshot> {
    snapshots
        .into_iter()
        .filter(|s| now.saturating_sub(s.taken_at) < delta_t.max(1))
        .collect()
}

/// Simple deterministic token estimate for opaque message payloads: one
/// token per four characters of content, at least one.
pub fn estimate_tokens(value: &Value) -> Tokens {
    let chars = match value {
        Value::Array(items) => items
            .iter()
            .map(|m| {
                m.get("content")
                    .and_then(Value::as_str)
                    .map(|s| s.len())
                    .unwrap_or_else(|| m.to_string().len())
            })
            .sum::<usize>(),
        Value::String(s) => s.len(),
        other => other.to_string().len(),
    };
    ((chars as u64) / 4).max(1)
}

fn extract_program_id(body: &Value) -> Result<ProgramId, GatewayError> {
    let raw = body
        .get("program_id")
        .and_then(Value::as_str)
        .unwrap_or_default();
    if raw.is_empty() {
        return Err(GatewayError::MissingProgramId);
    }
    Ok(ProgramId::new(raw))
}

/// The forwarded request: everything except the consumed `program_id`
/// reaches the backend unmodified.
pub fn strip_program_id(body: &Value) -> Value {
    match body {
        Value::Object(map) => {
            let mut out = map.clone();
            out.remove("program_id");
            Value::Object(out)
        }
        other => other.clone(),
    }
}

pub(crate) fn chat_response(parked: &ParkedChat, program: &AgentProgram, now: Tick) -> Value {
    let model = parked
        .body
        .get("model")
        .cloned()
        .unwrap_or_else(|| json!("sim"));
    let completion = parked.max_tokens;
    let content = format!(
        "[sim completion] {} tokens emitted by {} at tick {}",
        completion, program.id, now
    );
    json!({
        "id": format!("cmpl-{}", parked.ticket),
        "object": "chat.completion",
        "created": now,
        "model": model,
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": content },
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": program.context_tokens.saturating_sub(completion),
            "completion_tokens": completion,
            "total_tokens": program.context_tokens
        }
    })
}

pub(crate) fn tool_response(parked: &ParkedTool, result_tokens: Tokens, now: Tick) -> Value {
    json!({
        "result": format!("[sim tool] {} -> ok", parked.command),
        "sandbox": parked.profile,
        "result_tokens": result_tokens,
        "completed_at": now
    })
}

impl Engine {
    /// `POST /v1/chat/completions`. Unknown program ids register
    /// implicitly; the request parks until the emission completes on a
    /// backend.
    pub fn handle_chat(&mut self, body: Value) -> Result<Accepted, GatewayError> {
        let id = extract_program_id(&body)?;
        let now = self.clock;
        let known = self.registry.contains(&id);
        if known {
            let program = self.registry.get(&id).expect("checked");
            if program.status.is_stopped() {
                return Err(GatewayError::ProgramStopped(id));
            }
            let rt = self.runtime.get(&id).expect("runtime exists");
            if rt.parked_chat.is_some() || rt.parked_tool.is_some() {
                return Err(GatewayError::RequestInFlight(id));
            }
        }
        let messages = body.get("messages").cloned().unwrap_or(Value::Null);
        let estimate = estimate_tokens(&messages);
        if !known {
            self.create_service_program(id.clone(), estimate)?;
        } else {
            // The client-side history can run ahead of our accounting
            // (synthesized content length drift); reconcile upward only.
            let tracked = self.registry.get(&id).expect("known").context_tokens;
            if estimate > tracked {
                self.service_grow_context(&id, estimate - tracked)?;
            }
        }
        let max_tokens = body
            .get("max_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(self.cfg.service.default_max_tokens)
            .max(1);
        let forwarded = strip_program_id(&body);
        let ticket = self.service.new_ticket();
        if self.service.capture_forwards {
            self.service.forwards.insert(ticket, forwarded.clone());
        }
        {
            let rt = self.runtime.get_mut(&id).expect("runtime exists");
            rt.parked_chat = Some(ParkedChat {
                ticket,
                body: forwarded,
                max_tokens,
            });
            rt.emission_remaining = max_tokens;
            rt.emission_active = true;
            rt.step_ready_at = now;
        }
        self.service_sync(&id);
        Ok(Accepted::Parked { ticket })
    }

    /// `POST /tools/run`.
    pub fn handle_tool(&mut self, body: Value) -> Result<Accepted, GatewayError> {
        let id = extract_program_id(&body)?;
        let program = self
            .registry
            .get(&id)
            .map_err(|_| GatewayError::UnknownProgram(id.clone()))?;
        if program.status.is_stopped() {
            return Err(GatewayError::ProgramStopped(id));
        }
        if matches!(program.status, ProgramStatus::Acting { .. }) {
            return Err(GatewayError::RequestInFlight(id));
        }
        let rt = self.runtime.get(&id).expect("runtime exists");
        if rt.parked_chat.is_some() || rt.parked_tool.is_some() {
            return Err(GatewayError::RequestInFlight(id));
        }
        let command = body
            .get("command")
            .and_then(Value::as_str)
            .unwrap_or("noop")
            .to_string();
        let profile = body
            .get("sandbox")
            .and_then(Value::as_str)
            .unwrap_or("default")
            .to_string();
        let result_tokens = (command.len() as u64 / 4) + 8;
        let ticket = self.service.new_ticket();
        {
            let rt = self.runtime.get_mut(&id).expect("runtime exists");
            rt.parked_tool = Some(ParkedTool {
                ticket,
                command,
                profile,
                result_tokens,
            });
        }
        // Issue immediately when the program is live and reasoning;
        // otherwise the engine issues it right after the next restore.
        self.service_issue_pending_tool(&id)?;
        Ok(Accepted::Parked { ticket })
    }

    /// `POST /programs/release`. Idempotent: a second release acks with
    /// zero reclaimed resources.
    pub fn handle_release(&mut self, body: Value) -> Result<Value, GatewayError> {
        let id = extract_program_id(&body)?;
        let program = self
            .registry
            .get(&id)
            .map_err(|_| GatewayError::UnknownProgram(id.clone()))?;
        if program.status.is_stopped() {
            return Ok(json!({
                "program_id": id.as_str(),
                "status": "STOPPED",
                "reclaimed": { "disk_units": 0, "ports": 0 }
            }));
        }
        // Fail any parked work before tearing down.
        let parked = self.runtime.get_mut(&id).map(|rt| {
            (
                rt.parked_chat.take().map(|p| p.ticket),
                rt.parked_tool.take().map(|p| p.ticket),
            )
        });
        if let Some((chat, tool)) = parked {
            for ticket in [chat, tool].into_iter().flatten() {
                let body = GatewayError::ProgramStopped(id.clone()).to_body();
                self.service.deliveries.push((ticket, body));
            }
        }
        let live_disk: u64 = self
            .tools
            .envs_of(&id)
            .iter()
            .filter(|e| e.prep_status != crate::tools::PrepStatus::Released)
            .map(|e| e.disk_units)
            .sum();
        let live_ports: u64 = self
            .tools
            .envs_of(&id)
            .iter()
            .filter(|e| e.prep_status != crate::tools::PrepStatus::Released)
            .count() as u64;
        self.release_program(&id)?;
        Ok(json!({
            "program_id": id.as_str(),
            "status": "STOPPED",
            "reclaimed": { "disk_units": live_disk, "ports": live_ports }
        }))
    }

    /// `GET /programs/{id}`: the ProgramState projection.
    pub fn program_state(&self, id: &ProgramId) -> Result<Value, GatewayError> {
        let p = self
            .registry
            .get(id)
            .map_err(|_| GatewayError::UnknownProgram(id.clone()))?;
        Ok(json!({
            "status": p.status.wire_name(),
            "backend_url": p.placement.map(|b| b.url()),
            "step_count": p.step_count,
            "total_tokens": p.total_tokens
        }))
    }

    /// `GET /metrics`.
    pub fn metrics_body(&self) -> Value {
        serde_json::to_value(self.report_now()).expect("report serializes")
    }

    /// One snapshot per registered backend; failures surface as
    /// `healthy = false`, never as errors.
    pub fn poll_backends(&self) -> Vec<BackendSnapshot> {
        let now = self.clock;
        self.backends
            .iter()
            .map(|b| BackendSnapshot {
                url: b.id.url(),
                backend: b.id,
                healthy: b.healthy,
                cache_config: Some(CacheConfig {
                    capacity_tokens: b.capacity_tokens,
                    chunk: self.cfg.scheduler.chunk,
                }),
                active_program_tokens: b.resident_total(),
                taken_at: now,
            })
            .collect()
    }

    /// Drains responses completed by recent ticks.
    pub fn take_deliveries(&mut self) -> Vec<(u64, Value)> {
        std::mem::take(&mut self.service.deliveries)
    }

    pub fn forwarded_request(&self, ticket: u64) -> Option<&Value> {
        self.service.forwards.get(&ticket)
    }
}
