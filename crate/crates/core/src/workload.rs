//! Reproducible workload traces.
//!
//! A trace scripts every program of an experiment: prompt size and, per step,
//! reasoning tokens, the tool profile + latency sampler, and result tokens.
//! All stochastic draws flow through named, seed-derived streams, so a trace
//! plus a seed fully determines a run, and latency draws do not shift when
//! the scheduling policy changes (paired-comparison variance reduction).

use crate::tools::{EnvProfile, LatencySampler};
use crate::types::Tokens;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("unknown trace preset: {0}")]
    UnknownPreset(String),
    #[error("trace must script at least one program")]
    Empty,
}

/// One tool invocation in a script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolStep {
    pub profile: String,
    pub sampler: LatencySampler,
}

/// One reasoning/acting step. The final step of a program carries no tool:
/// its emission is the workflow's closing answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub reasoning_tokens: Tokens,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<ToolStep>,
    #[serde(default)]
    pub result_tokens: Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramScript {
    pub prompt_tokens: Tokens,
    pub steps: Vec<ScriptStep>,
}

impl ProgramScript {
    /// Steps that issue a tool call; this is what the throughput metric
    /// counts.
    pub fn tool_steps(&self) -> u64 {
        self.steps.iter().filter(|s| s.tool.is_some()).count() as u64
    }

    pub fn total_scripted_tokens(&self) -> Tokens {
        self.prompt_tokens
            + self
                .steps
                .iter()
                .map(|s| s.reasoning_tokens + if s.tool.is_some() { s.result_tokens } else { 0 })
                .sum::<Tokens>()
    }

    pub fn profiles(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.steps {
            if let Some(t) = &s.tool {
                if !out.contains(&t.profile) {
                    out.push(t.profile.clone());
                }
            }
        }
        out
    }
}

/// Arrival process. Closed-loop keeps a fixed number of in-flight programs,
/// replacing each completion immediately; open-loop draws interarrival gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalModel {
    Closed { concurrency: usize },
    Open { mean_interarrival: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub seed: u64,
    pub preset: String,
    pub arrival: ArrivalModel,
    /// Environment profiles referenced by the scripts; traces are
    /// self-contained.
    pub profiles: BTreeMap<String, EnvProfile>,
    pub programs: Vec<ProgramScript>,
}

impl WorkloadTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("trace serializes"));
        hex(&hasher.finalize())
    }

    pub fn mean_final_context(&self) -> Tokens {
        if self.programs.is_empty() {
            return 0;
        }
        self.programs
            .iter()
            .map(|p| p.total_scripted_tokens())
            .sum::<Tokens>()
            / self.programs.len() as u64
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// Stream tags keep independent draws independent: changing how many draws one
// stream consumes never perturbs another stream.
const TAG_GEN: u64 = 0x11;
const TAG_TOOL_LATENCY: u64 = 0x22;
const TAG_ARRIVAL: u64 = 0x33;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Named stream: a ChaCha12 generator derived from the trace seed and a salt
/// path.
pub fn derive_rng(seed: u64, salts: &[u64]) -> ChaCha12Rng {
    let mut state = splitmix(seed);
    for &s in salts {
        state = splitmix(state ^ s);
    }
    let mut bytes = [0u8; 32];
    let mut word = state;
    for chunk in bytes.chunks_mut(8) {
        word = splitmix(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha12Rng::from_seed(bytes)
}

/// Per-(program, step) tool latency stream.
pub fn tool_latency_rng(seed: u64, program_index: usize, step_index: usize) -> ChaCha12Rng {
    derive_rng(
        seed,
        &[TAG_TOOL_LATENCY, program_index as u64, step_index as u64],
    )
}

/// Open-loop interarrival stream.
pub fn arrival_rng(seed: u64) -> ChaCha12Rng {
    derive_rng(seed, &[TAG_ARRIVAL])
}

struct PresetParams {
    profile_name: &'static str,
    disk_units: u64,
    prep_latency: u64,
    prompt_range: (Tokens, Tokens),
    steps_range: (u64, u64),
    reasoning_mean: f64,
    reasoning_sigma: f64,
    reasoning_clamp: (Tokens, Tokens),
    result_range: (Tokens, Tokens),
    tool: ToolKind,
    default_concurrency: usize,
}

enum ToolKind {
    /// Deterministic duration drawn per step at generation time.
    DeterministicRange(u64, u64),
    /// One heavy-tailed sampler shared by every step.
    HeavyTailed { p50: u64, p95: u64, p99: u64, cap: u64 },
}

/// Reasoning lengths default to a log-normal around multi-hundred-token agent
/// turns; presets override the scale to match their workload shape.
pub const DEFAULT_REASONING_MEAN: f64 = 400.0;

fn preset_params(preset: &str) -> Result<PresetParams, WorkloadError> {
    match preset {
        // Lightweight coding agent: big repo-context prompts, moderate
        // per-turn growth, short local tools with stable latency.
        "mini-swe" => Ok(PresetParams {
            profile_name: "mini-swe",
            disk_units: 2,
            prep_latency: 4,
            prompt_range: (4000, 6000),
            steps_range: (3, 8),
            reasoning_mean: 140.0,
            reasoning_sigma: 0.40,
            reasoning_clamp: (48, 480),
            result_range: (24, 80),
            tool: ToolKind::DeterministicRange(40, 90),
            default_concurrency: 16,
        }),
        // Heavy-initialization workflow: ~10 disk units per sandbox and a
        // long environment preparation phase.
        "heavy-init" => Ok(PresetParams {
            profile_name: "heavy-init",
            disk_units: 10,
            prep_latency: 32,
            prompt_range: (4000, 6000),
            steps_range: (3, 8),
            reasoning_mean: 140.0,
            reasoning_sigma: 0.40,
            reasoning_clamp: (48, 480),
            result_range: (24, 80),
            tool: ToolKind::DeterministicRange(40, 90),
            default_concurrency: 16,
        }),
        // Remote-service tools: the tail dwarfs the median, so latency
        // prediction is brittle by construction.
        "stochastic-tools" => Ok(PresetParams {
            profile_name: "stochastic-tools",
            disk_units: 2,
            prep_latency: 4,
            prompt_range: (4000, 6000),
            steps_range: (3, 8),
            reasoning_mean: 140.0,
            reasoning_sigma: 0.40,
            reasoning_clamp: (48, 480),
            result_range: (24, 80),
            tool: ToolKind::HeavyTailed {
                p50: 4,
                p95: 150,
                p99: 800,
                cap: 3000,
            },
            default_concurrency: 16,
        }),
        other => Err(WorkloadError::UnknownPreset(other.to_string())),
    }
}

pub const PRESETS: [&str; 3] = ["mini-swe", "heavy-init", "stochastic-tools"];

/// Generates a reproducible trace: identical `(preset, n_programs, seed)`
/// yield identical trace files.
pub fn generate_trace(
    preset: &str,
    n_programs: usize,
    seed: u64,
) -> Result<WorkloadTrace, WorkloadError> {
    if n_programs == 0 {
        return Err(WorkloadError::Empty);
    }
    let params = preset_params(preset)?;
    let mut profiles = BTreeMap::new();
    let sampler_for_profile = match params.tool {
        ToolKind::DeterministicRange(lo, _) => LatencySampler::Deterministic { ticks: lo },
        ToolKind::HeavyTailed { p50, p95, p99, cap } => {
            LatencySampler::HeavyTailed { p50, p95, p99, cap }
        }
    };
    profiles.insert(
        params.profile_name.to_string(),
        EnvProfile {
            disk_units: params.disk_units,
            prep_latency: params.prep_latency,
            sampler: sampler_for_profile,
        },
    );

    let mut programs = Vec::with_capacity(n_programs);
    for i in 0..n_programs {
        let mut rng = derive_rng(seed, &[TAG_GEN, i as u64]);
        let prompt_tokens = rng.gen_range(params.prompt_range.0..=params.prompt_range.1);
        let n_steps = rng.gen_range(params.steps_range.0..=params.steps_range.1);
        let mu = params.reasoning_mean.ln() - params.reasoning_sigma.powi(2) / 2.0;
        let lognormal = LogNormal::new(mu, params.reasoning_sigma).expect("valid lognormal");
        let mut steps = Vec::new();
        for _ in 0..n_steps {
            let reasoning = (lognormal.sample(&mut rng) as Tokens)
                .clamp(params.reasoning_clamp.0, params.reasoning_clamp.1);
            let sampler = match params.tool {
                ToolKind::DeterministicRange(lo, hi) => LatencySampler::Deterministic {
                    ticks: rng.gen_range(lo..=hi),
                },
                ToolKind::HeavyTailed { p50, p95, p99, cap } => {
                    LatencySampler::HeavyTailed { p50, p95, p99, cap }
                }
            };
            steps.push(ScriptStep {
                reasoning_tokens: reasoning,
                tool: Some(ToolStep {
                    profile: params.profile_name.to_string(),
                    sampler,
                }),
                result_tokens: rng.gen_range(params.result_range.0..=params.result_range.1),
            });
        }
        // Closing answer emission, no tool.
        let closing = (lognormal.sample(&mut rng) as Tokens)
            .clamp(params.reasoning_clamp.0, params.reasoning_clamp.1);
        steps.push(ScriptStep {
            reasoning_tokens: closing,
            tool: None,
            result_tokens: 0,
        });
        programs.push(ProgramScript {
            prompt_tokens,
            steps,
        });
    }

    Ok(WorkloadTrace {
        seed,
        preset: preset.to_string(),
        arrival: ArrivalModel::Closed {
            concurrency: params.default_concurrency.min(n_programs),
        },
        profiles,
        programs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_yield_identical_trace_files() {
        let a = generate_trace("mini-swe", 96, 7).unwrap();
        let b = generate_trace("mini-swe", 96, 7).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.sha256(), b.sha256());
        let c = generate_trace("mini-swe", 96, 8).unwrap();
        assert_ne!(a.sha256(), c.sha256());
    }

    #[test]
    fn heavy_init_has_positive_prep() {
        let t = generate_trace("heavy-init", 1, 1).unwrap();
        let profile = t.profiles.get("heavy-init").unwrap();
        assert!(profile.prep_latency > 0);
        assert_eq!(profile.disk_units, 10);
        assert_eq!(t.programs.len(), 1);
    }

    #[test]
    fn unknown_preset_rejected() {
        assert_eq!(
            generate_trace("nope", 4, 1).unwrap_err(),
            WorkloadError::UnknownPreset("nope".into())
        );
    }

    #[test]
    fn scripts_end_with_a_toolless_closing_step() {
        let t = generate_trace("mini-swe", 8, 3).unwrap();
        for p in &t.programs {
            assert!(p.steps.last().unwrap().tool.is_none());
            assert!(p.steps.len() >= 2);
            assert_eq!(p.tool_steps() as usize, p.steps.len() - 1);
        }
    }

    #[test]
    fn stochastic_preset_draws_match_quantiles_via_streams() {
        let t = generate_trace("stochastic-tools", 4, 11).unwrap();
        let sampler = t.programs[0].steps[0].tool.as_ref().unwrap().sampler;
        let mut draws: Vec<u64> = Vec::with_capacity(100_000);
        for i in 0..100_000usize {
            let mut rng = tool_latency_rng(t.seed, i % 4, i / 4);
            draws.push(sampler.sample(&mut rng));
        }
        draws.sort_unstable();
        let q = |f: f64| draws[(draws.len() as f64 * f) as usize];
        assert!((q(0.50) as f64 - 4.0).abs() <= 0.4);
        assert!((q(0.95) as f64 - 150.0).abs() <= 15.0);
        assert!((q(0.99) as f64 - 800.0).abs() <= 80.0);
    }

    #[test]
    fn named_streams_are_stable_and_independent() {
        use rand::RngCore;
        let mut a = tool_latency_rng(9, 3, 4);
        let mut b = tool_latency_rng(9, 3, 4);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = tool_latency_rng(9, 3, 5);
        let mut d = tool_latency_rng(9, 4, 3);
        let x = c.next_u64();
        assert_ne!(x, d.next_u64());
    }

    #[test]
    fn mean_final_context_reflects_scripted_tokens() {
        let t = generate_trace("mini-swe", 16, 2).unwrap();
        let mean = t.mean_final_context();
        assert!(mean > 4000, "mean {mean}");
        let manual: u64 = t
            .programs
            .iter()
            .map(|p| p.total_scripted_tokens())
            .sum::<u64>()
            / 16;
        assert_eq!(mean, manual);
    }
}
