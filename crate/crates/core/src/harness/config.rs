use std::fmt;

use serde::{Deserialize, Serialize};

use crate::events::Nanos;
use crate::netsim::{FaultTag, SimConfig};
use crate::novelty::{DEFAULT_EPSILON, DEFAULT_HASH_SEED, DEFAULT_K};
use crate::policy::{DEFAULT_ALPHA, DEFAULT_GAMMA};
use crate::raftlite::{BugFlags, RaftParams};

pub const CONFIG_VERSION: u32 = 1;

/// A configuration problem, pointing at the offending key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { key: key.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// How long a campaign runs. Exactly one field must be set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedules: Option<u64>,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { steps: Some(600), schedules: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoveltyConfig {
    pub epsilon: f64,
    pub k: usize,
    pub hash_seed: u64,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        NoveltyConfig { epsilon: DEFAULT_EPSILON, k: DEFAULT_K, hash_seed: DEFAULT_HASH_SEED }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig { alpha: DEFAULT_ALPHA, gamma: DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub keywords: Vec<String>,
    /// Consecutive fully connected, all-running windows without a leader
    /// tolerated before reporting.
    pub leaderless_windows: u32,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { keywords: vec!["fatal".into(), "error".into(), "bug".into()], leaderless_windows: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub requests_per_window: u32,
    pub keys: u32,
    pub read_fraction: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig { requests_per_window: 4, keys: 4, read_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub version: u32,
    pub seed: u64,
    pub steps_per_schedule: usize,
    pub window_ns: Nanos,
    pub reset_ns: Nanos,
    pub budget: Budget,
    pub faults: Vec<String>,
    pub sim: SimConfig,
    pub raft: RaftParams,
    pub bugs: BugFlags,
    pub novelty: NoveltyConfig,
    pub learning: LearningConfig,
    pub oracles: OracleConfig,
    pub workload: WorkloadConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            version: CONFIG_VERSION,
            seed: 0,
            steps_per_schedule: 12,
            window_ns: 2_500_000_000,
            reset_ns: 5_000_000_000,
            budget: Budget::default(),
            faults: FaultTag::ALL.iter().map(|t| t.name().to_owned()).collect(),
            sim: SimConfig::default(),
            raft: RaftParams::default(),
            bugs: BugFlags::default(),
            novelty: NoveltyConfig::default(),
            learning: LearningConfig::default(),
            oracles: OracleConfig::default(),
            workload: WorkloadConfig::default(),
        }
    }
}

fn unit_interval(key: &str, v: f64, allow_zero: bool) -> Result<(), ConfigError> {
    let ok = if allow_zero { (0.0..=1.0).contains(&v) } else { v > 0.0 && v <= 1.0 };
    if ok {
        Ok(())
    } else {
        let range = if allow_zero { "[0, 1]" } else { "(0, 1]" };
        Err(ConfigError::new(key, format!("{v} is outside {range}")))
    }
}

impl CampaignConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: CampaignConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .and_then(|span| {
                    let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
                    let line = text[start..].lines().next()?;
                    let key = line.split('=').next()?.trim().trim_matches(['[', ']']);
                    (!key.is_empty()).then(|| key.to_owned())
                })
                .unwrap_or_else(|| "<document>".to_owned());
            ConfigError::new(key, e.message().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn alphabet(&self) -> Result<Vec<FaultTag>, ConfigError> {
        let mut out = Vec::with_capacity(self.faults.len());
        for (i, name) in self.faults.iter().enumerate() {
            let tag: FaultTag = name.parse().map_err(|m: String| ConfigError::new(format!("faults[{i}]"), m))?;
            if out.contains(&tag) {
                return Err(ConfigError::new(format!("faults[{i}]"), format!("{name} listed twice")));
            }
            out.push(tag);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::new(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        if self.steps_per_schedule == 0 {
            return Err(ConfigError::new("steps_per_schedule", "must be at least 1"));
        }
        self.sim.validate().map_err(|e| ConfigError::new("sim", e.to_string()))?;
        if self.window_ns <= self.sim.max_latency_ns {
            return Err(ConfigError::new("window_ns", "must exceed sim.max_latency_ns"));
        }
        if self.reset_ns == 0 {
            return Err(ConfigError::new("reset_ns", "must be positive"));
        }
        match (self.budget.steps, self.budget.schedules) {
            (Some(0), None) | (None, Some(0)) => {
                return Err(ConfigError::new("budget", "must be positive"))
            }
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(ConfigError::new("budget", "set exactly one of steps or schedules")),
        }
        if self.faults.is_empty() {
            return Err(ConfigError::new("faults", "the fault alphabet is empty"));
        }
        self.alphabet()?;
        unit_interval("novelty.epsilon", self.novelty.epsilon, false)?;
        if self.novelty.k == 0 {
            return Err(ConfigError::new("novelty.k", "must be at least 1"));
        }
        unit_interval("learning.alpha", self.learning.alpha, false)?;
        unit_interval("learning.gamma", self.learning.gamma, false)?;
        if self.learning.gamma >= 1.0 {
            return Err(ConfigError::new("learning.gamma", "must be below 1 for bounded Q-values"));
        }
        unit_interval("workload.read_fraction", self.workload.read_fraction, true)?;
        if self.workload.keys == 0 {
            return Err(ConfigError::new("workload.keys", "must be at least 1"));
        }
        if self.oracles.keywords.iter().any(|k| k.trim().is_empty()) {
            return Err(ConfigError::new("oracles.keywords", "keywords must be non-empty"));
        }
        if self.raft.election_min_ns == 0 || self.raft.election_min_ns > self.raft.election_max_ns {
            return Err(ConfigError::new("raft.election_min_ns", "must be positive and at most raft.election_max_ns"));
        }
        if self.raft.heartbeat_ns == 0 || self.raft.heartbeat_ns >= self.raft.election_min_ns {
            return Err(ConfigError::new("raft.heartbeat_ns", "must be positive and below raft.election_min_ns"));
        }
        if self.raft.max_entries_per_append == 0 {
            return Err(ConfigError::new("raft.max_entries_per_append", "must be at least 1"));
        }
        Ok(())
    }

    /// Total steps the budget allows.
    pub fn total_steps(&self) -> u64 {
        match (self.budget.steps, self.budget.schedules) {
            (Some(s), _) => s,
            (None, Some(n)) => n * self.steps_per_schedule as u64,
            (None, None) => 0,
        }
    }
}
