//! Engine configuration, loadable from TOML.
//!
//! ```toml
//! [cluster]
//! backends = 2
//! capacity_tokens = 16384
//!
//! [scheduler]
//! delta_t = 5
//! lambda_max = 1.0
//! lambda_min = 1.0
//! chunk = 64
//!
//! [scheduler.decay]
//! kind = "geometric"   # constant1 | geometric | exponential
//! base = 2.0
//! # rate = 0.3         # exponential only
//!
//! [pools]
//! disk_capacity = 512
//! port_start = 30000
//! port_count = 256
//!
//! [tools]
//! async_prep = true
//! prep_lookahead = 4
//! gc_hooks = true
//!
//! [envs.profiles.mini-swe]
//! disk_units = 2
//! prep_latency = 4
//! sampler = { kind = "deterministic", ticks = 60 }
//! ```

use crate::scheduler::{SchedulerConfig, SchedulerError};
use crate::tools::EnvProfile;
use crate::types::{Tick, Tokens};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub backends: usize,
    pub capacity_tokens: Tokens,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            backends: 2,
            capacity_tokens: 16384,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub disk_capacity: u64,
    pub port_start: u16,
    pub port_count: u16,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            disk_capacity: 4096,
            port_start: 30000,
            port_count: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolConfig {
    /// Prepare environments for near-restore queued programs so setup
    /// overlaps reasoning. `None` resolves per policy: program-aware on,
    /// request-level baselines off.
    pub async_prep: Option<bool>,
    /// How many queue-top programs count as "near the restore threshold".
    /// `None` defaults to `2 × backends`.
    pub prep_lookahead: Option<usize>,
    pub gc_hooks: bool,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            async_prep: None,
            prep_lookahead: None,
            gc_hooks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Tokens decoded for a chat request that carries no max_tokens.
    pub default_max_tokens: Tokens,
    /// Park timeout for requests waiting on a restore; ticks.
    pub park_timeout: Tick,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            default_max_tokens: 64,
            park_timeout: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EnvsConfig {
    pub profiles: BTreeMap<String, EnvProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EngineConfig {
    pub cluster: ClusterConfig,
    pub scheduler: SchedulerConfig,
    pub pools: PoolConfig,
    pub tools: ToolConfig,
    pub service: ServiceConfig,
    pub envs: EnvsConfig,
    /// Wall-clock seconds one tick stands for; only used to express
    /// throughput in steps per minute.
    pub tick_seconds: f64,
    /// Optional hard cap on run length.
    pub duration_ticks: Option<Tick>,
    /// Per-decode-step watermark guard (off by default: the monitor is
    /// periodic and transient overshoot within one interval is accepted).
    pub decode_guard: bool,
    /// Retain every STP sample in memory (tests only).
    pub retain_samples: bool,
}

impl EngineConfig {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let mut cfg: EngineConfig = toml::from_str(s)?;
        if cfg.tick_seconds == 0.0 {
            cfg.tick_seconds = 1.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cluster.backends == 0 {
            return Err(ConfigError::Invalid("need at least one backend".into()));
        }
        if self.cluster.capacity_tokens == 0 {
            return Err(ConfigError::Invalid("capacity must be positive".into()));
        }
        if self.cluster.capacity_tokens < self.scheduler.chunk {
            return Err(ConfigError::Invalid(
                "capacity smaller than one prefill chunk".into(),
            ));
        }
        if self.tick_seconds <= 0.0 {
            return Err(ConfigError::Invalid("tick_seconds must be positive".into()));
        }
        self.scheduler.validate()?;
        for (name, profile) in &self.envs.profiles {
            profile
                .sampler
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("profile {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn prep_lookahead(&self) -> usize {
        self.tools
            .prep_lookahead
            .unwrap_or(self.cluster.backends * 2)
    }
}

impl EngineConfig {
    /// Normalize tick_seconds default when constructed via Default.
    pub fn standard() -> Self {
        EngineConfig {
            tick_seconds: 1.0,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::DecaySpec;

    #[test]
    fn parses_scheduler_block_with_spec_key_names() {
        let cfg = EngineConfig::from_toml(
            r#"
            [cluster]
            backends = 3
            capacity_tokens = 8192

            [scheduler]
            delta_t = 7
            lambda_max = 0.95
            lambda_min = 0.85
            chunk = 32

            [scheduler.decay]
            kind = "exponential"
            rate = 0.3

            [envs.profiles.mini]
            disk_units = 2
            prep_latency = 4
            sampler = { kind = "deterministic", ticks = 12 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.cluster.backends, 3);
        assert_eq!(cfg.scheduler.delta_t, 7);
        assert_eq!(cfg.scheduler.lambda_max, 0.95);
        assert_eq!(cfg.scheduler.decay, DecaySpec::Exponential { rate: 0.3 });
        assert_eq!(cfg.scheduler.chunk, 32);
        assert_eq!(cfg.envs.profiles["mini"].disk_units, 2);
    }

    #[test]
    fn defaults_follow_evaluated_setup() {
        let cfg = EngineConfig::standard();
        assert_eq!(cfg.scheduler.delta_t, 5);
        assert_eq!(cfg.scheduler.decay, DecaySpec::Geometric { base: 2.0 });
        assert_eq!(cfg.scheduler.lambda_max, 1.0);
        assert_eq!(cfg.scheduler.lambda_min, 1.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_watermarks_rejected() {
        let err = EngineConfig::from_toml(
            r#"
            [scheduler]
            lambda_max = 0.5
            lambda_min = 0.9
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("lambda"));
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = EngineConfig::standard();
        let parsed = EngineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(parsed, cfg);
    }
}
