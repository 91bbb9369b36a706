//! Run configuration: backend roles, decoding profiles, source-keyed trace
//! schemas, budgets, seeds, and paths. Loads from TOML with built-in
//! defaults; the CLI applies flag overrides on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::http::{HttpBackend, HttpConfig, RetryPolicy};
use crate::backends::sim::{SimBackend, SimScript};
use crate::backends::{Backend, BudgetTracker, SamplingParams};
use crate::trace::TraceSchema;
use crate::tts::Strategy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config file {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Family decoding profile. One-shot style strategies and the greedy loop
/// use different completion budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingProfile {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    pub max_new_tokens_one_shot: u32,
    pub max_new_tokens_greedy: u32,
}

impl DecodingProfile {
    pub fn qwen() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.8,
            top_k: 20,
            repetition_penalty: 1.05,
            max_new_tokens_one_shot: 16384,
            max_new_tokens_greedy: 8196,
        }
    }

    pub fn gemma() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.95,
            top_k: 64,
            repetition_penalty: 1.0,
            max_new_tokens_one_shot: 16384,
            max_new_tokens_greedy: 8196,
        }
    }

    /// Near-deterministic single-sample decoding for baseline evaluation.
    pub fn baseline() -> Self {
        Self {
            temperature: 0.01,
            top_p: 0.001,
            top_k: 1,
            repetition_penalty: 1.0,
            max_new_tokens_one_shot: 16384,
            max_new_tokens_greedy: 16384,
        }
    }

    pub fn sampling(&self, n: u32, strategy: Strategy) -> SamplingParams {
        let max_new_tokens = match strategy {
            Strategy::Greedy => self.max_new_tokens_greedy,
            _ => self.max_new_tokens_one_shot,
        };
        SamplingParams {
            n,
            temperature: self.temperature,
            top_p: self.top_p,
            top_k: self.top_k,
            max_new_tokens,
            repetition_penalty: self.repetition_penalty,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Sim,
}

/// One model role (policy, prm, or judge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_profile_name")]
    pub profile: String,
}

fn default_profile_name() -> String {
    "qwen".into()
}

impl Default for RoleConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Sim,
            base_url: None,
            model: String::new(),
            profile: default_profile_name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RolesSection {
    #[serde(default)]
    pub policy: RoleConfig,
    #[serde(default)]
    pub prm: RoleConfig,
    #[serde(default)]
    pub judge: RoleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Candidate count N for TTS strategies.
    #[serde(default = "default_n")]
    pub n: u32,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// MC threshold for step labels (strict `>`).
    #[serde(default)]
    pub mc_threshold: f64,
    /// In-flight request cap per endpoint.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Solutions generated per problem during dataset construction.
    #[serde(default = "default_solutions_per_problem")]
    pub solutions_per_problem: u32,
    /// Continuations sampled per step for MC scoring.
    #[serde(default = "default_rollout_n")]
    pub rollout_n: u32,
    /// Schema used for sources without their own entry in `[schemas]`.
    #[serde(default = "default_schema_name")]
    pub default_schema: String,
    /// Mask perception rounds in exported training records.
    #[serde(default)]
    pub mask_perception: bool,
}

fn default_seed() -> u64 {
    42
}
fn default_strategy() -> Strategy {
    Strategy::OneShot
}
fn default_n() -> u32 {
    16
}
fn default_max_steps() -> usize {
    12
}
fn default_concurrency() -> usize {
    8
}
fn default_solutions_per_problem() -> u32 {
    5
}
fn default_rollout_n() -> u32 {
    16
}
fn default_schema_name() -> String {
    "default".into()
}

impl Default for RunSection {
    fn default() -> Self {
        toml::from_str("").expect("empty run section has defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BudgetSection {
    #[serde(default)]
    pub max_requests: Option<u64>,
    #[serde(default)]
    pub max_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IoSection {
    #[serde(default)]
    pub problems: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sim_script: Option<PathBuf>,
    /// Existing labeled-samples file for balance/stats/export stages.
    #[serde(default)]
    pub labeled: Option<PathBuf>,
    /// Existing outcomes file for eval/analysis stages.
    #[serde(default)]
    pub outcomes: Option<PathBuf>,
    /// Step-annotated benchmark file for eval-steps.
    #[serde(default)]
    pub bench: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BalanceSection {
    /// Source whose incorrect samples get downsampled; defaults to the
    /// source with the most incorrect samples.
    #[serde(default)]
    pub majority_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonSection {
    #[serde(default = "default_bon_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_bon_trials")]
    pub trials: u32,
}

fn default_bon_ks() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}
fn default_bon_trials() -> u32 {
    200
}

impl Default for BonSection {
    fn default() -> Self {
        Self {
            ks: default_bon_ks(),
            trials: default_bon_trials(),
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub backends: RolesSection,
    /// Extra or overriding decoding profiles; `qwen`, `gemma`, and
    /// `baseline` are built in.
    #[serde(default)]
    pub profiles: BTreeMap<String, DecodingProfile>,
    /// Trace schemas keyed by source-dataset name; `raven`, `ai2d`, and
    /// `default` are built in.
    #[serde(default)]
    pub schemas: BTreeMap<String, TraceSchema>,
    #[serde(default)]
    pub io: IoSection,
    #[serde(default)]
    pub balance: BalanceSection,
    #[serde(default)]
    pub bon: BonSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.n < 1 {
            return Err(ConfigError::Invalid("run.n must be >= 1".into()));
        }
        if self.run.max_steps < 1 {
            return Err(ConfigError::Invalid("run.max_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.run.mc_threshold) {
            return Err(ConfigError::Invalid(
                "run.mc_threshold must be in [0, 1)".into(),
            ));
        }
        if self.run.concurrency < 1 {
            return Err(ConfigError::Invalid("run.concurrency must be >= 1".into()));
        }
        if self.run.rollout_n < 1 || self.run.solutions_per_problem < 1 {
            return Err(ConfigError::Invalid(
                "rollout_n and solutions_per_problem must be >= 1".into(),
            ));
        }
        if self.budget.max_requests == Some(0) || self.budget.max_tokens == Some(0) {
            return Err(ConfigError::Invalid("budget caps must be positive".into()));
        }
        for role in [&self.backends.policy, &self.backends.prm, &self.backends.judge] {
            if self.profile(&role.profile).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "unknown decoding profile {:?}",
                    role.profile
                )));
            }
        }
        if self.schema_for_source("__no_such_source__").is_none() {
            return Err(ConfigError::Invalid(format!(
                "default schema {:?} is not defined",
                self.run.default_schema
            )));
        }
        for (source, schema) in &self.schemas {
            schema
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("schema for {source:?}: {e}")))?;
        }
        if self.bon.ks.is_empty() || self.bon.trials == 0 {
            return Err(ConfigError::Invalid(
                "bon.ks must be non-empty and bon.trials positive".into(),
            ));
        }
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Option<DecodingProfile> {
        if let Some(profile) = self.profiles.get(name) {
            return Some(*profile);
        }
        match name {
            "qwen" => Some(DecodingProfile::qwen()),
            "gemma" => Some(DecodingProfile::gemma()),
            "baseline" => Some(DecodingProfile::baseline()),
            _ => None,
        }
    }

    fn builtin_schema(name: &str) -> Option<TraceSchema> {
        match name {
            "raven" | "default" | "perception-reasoning" => {
                Some(TraceSchema::perception_reasoning())
            }
            "ai2d" | "visual-elements" => Some(TraceSchema::visual_elements()),
            _ => None,
        }
    }

    /// Schema for a source dataset: its own `[schemas]` entry, a built-in
    /// with its name, or the configured default.
    pub fn schema_for_source(&self, source: &str) -> Option<TraceSchema> {
        if let Some(schema) = self.schemas.get(source) {
            return Some(schema.clone());
        }
        if let Some(schema) = Self::builtin_schema(source) {
            return Some(schema);
        }
        if let Some(schema) = self.schemas.get(&self.run.default_schema) {
            return Some(schema.clone());
        }
        Self::builtin_schema(&self.run.default_schema)
    }

    /// Stable hash of the resolved run semantics, embedded in every output.
    /// Paths are excluded so the same run written elsewhere keeps its
    /// identity.
    pub fn fingerprint(&self) -> String {
        let mut semantic = self.clone();
        semantic.io = IoSection::default();
        let canonical = serde_json::to_vec(&semantic).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sampling parameters for a role under the current strategy and n.
    pub fn sampling_for(&self, role: &RoleConfig, n: u32, strategy: Strategy) -> SamplingParams {
        self.profile(&role.profile)
            .unwrap_or_else(DecodingProfile::qwen)
            .sampling(n, strategy)
    }
}

fn env_override(role: &str, suffix: &str) -> Option<String> {
    std::env::var(format!("{}_{}", role.to_uppercase(), suffix))
        .or_else(|_| std::env::var(format!("MODEL_{suffix}")))
        .ok()
        .filter(|v| !v.is_empty())
}

/// The three role backends of a run, sharing one budget tracker.
pub struct BackendSet {
    pub policy: Arc<dyn Backend>,
    pub prm: Arc<dyn Backend>,
    pub judge: Arc<dyn Backend>,
    pub budget: Arc<BudgetTracker>,
}

/// Instantiates the role backends. Sim roles share the script loaded from
/// `io.sim_script` (or an empty script) and derive per-role seeds from the
/// run seed. HTTP roles resolve `{ROLE}_API_BASE` / `{ROLE}_API_KEY` with
/// `MODEL_API_BASE` / `MODEL_API_KEY` fallbacks.
pub fn build_backends(config: &RunConfig) -> Result<BackendSet, ConfigError> {
    let budget = BudgetTracker::new(config.budget.max_requests, config.budget.max_tokens);
    let script = match &config.io.sim_script {
        Some(path) => SimScript::load(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?,
        None => SimScript::default(),
    };
    let build = |role_name: &str, role: &RoleConfig| -> Result<Arc<dyn Backend>, ConfigError> {
        match role.kind {
            BackendKind::Sim => {
                let seed = crate::seeds::derive_seed(config.run.seed, "backend", role_name);
                Ok(Arc::new(
                    SimBackend::new(script.clone(), seed).with_budget(budget.clone()),
                ))
            }
            BackendKind::Http => {
                let base_url = env_override(role_name, "API_BASE")
                    .or_else(|| role.base_url.clone())
                    .ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "role {role_name}: no base_url configured and no API_BASE env set"
                        ))
                    })?;
                let mut http = HttpConfig::new(base_url, role.model.clone());
                http.api_key = env_override(role_name, "API_KEY");
                http.max_in_flight = config.run.concurrency;
                http.retry = RetryPolicy {
                    attempts: 3,
                    initial_backoff: Duration::from_millis(500),
                };
                Ok(Arc::new(
                    HttpBackend::new(http, budget.clone())
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                ))
            }
        }
    };
    Ok(BackendSet {
        policy: build("policy", &config.backends.policy)?,
        prm: build("prm", &config.backends.prm)?,
        judge: build("judge", &config.backends.judge)?,
        budget,
    })
}
