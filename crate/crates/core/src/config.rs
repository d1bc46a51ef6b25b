//! Operator configuration: one TOML file, secrets from the environment.
//!
//! ```toml
//! prompts_dir = "my-prompts"      # per-file overrides of the built-in assets
//!
//! [gateway]
//! endpoint = "http://localhost:8000/v1"
//! model = "Qwen2.5-VL-7B-Instruct"
//!
//! [decoding]
//! preset = "a"
//!
//! [retrieval]
//! top_k = 8
//! tau = 0.9
//!
//! [index]
//! dir = "index"
//!
//! [sandbox]
//! runner = ["python3", "runner.py"]
//!
//! [agent]
//! max_turns = 10
//! tools = ["search", "perceive", "code"]
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::gateway::{DecodingConfig, DecodingPreset, GatewayConfig, ImagePolicy, RetryPolicy, DEFAULT_MAX_NEW_TOKENS};
use crate::pipeline::{Mode, PipelineSettings};
use crate::protocol::ToolKind;
use crate::retrieval::RetrievalConfig;
use crate::sandbox::ExecutionLimits;

pub const ENV_ENDPOINT: &str = "PLANEXEC_ENDPOINT";
pub const ENV_MODEL: &str = "PLANEXEC_MODEL";
pub const ENV_API_KEY: &str = "PLANEXEC_API_KEY";
pub const ENV_EMBEDDING_ENDPOINT: &str = "PLANEXEC_EMBEDDING_ENDPOINT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub image_policy: ImagePolicy,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: None,
            api_key: None,
            timeout_secs: 120.0,
            max_in_flight: 8,
            max_attempts: RetryPolicy::default().max_attempts,
            image_policy: ImagePolicy::default(),
        }
    }
}

/// Preset plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingSection {
    pub preset: DecodingPreset,
    pub max_new_tokens: u32,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub top_k: Option<u32>,
    pub repetition_penalty: Option<f64>,
}

impl Default for DecodingSection {
    fn default() -> Self {
        Self {
            preset: DecodingPreset::A,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: None,
            top_p: None,
            top_k: None,
            repetition_penalty: None,
        }
    }
}

impl DecodingSection {
    pub fn resolve(&self) -> DecodingConfig {
        let mut d = DecodingConfig::preset(self.preset);
        d.max_new_tokens = self.max_new_tokens;
        if let Some(v) = self.temperature {
            d.temperature = v;
        }
        if let Some(v) = self.top_p {
            d.top_p = v;
        }
        if let Some(v) = self.top_k {
            d.top_k = v;
        }
        if let Some(v) = self.repetition_penalty {
            d.repetition_penalty = v;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    /// Directory written by `ingest`.
    pub dir: Option<PathBuf>,
    /// Embedding service for the cross-modal path; unset disables it.
    pub embedding_endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSection {
    /// Runner argv prefix. Empty disables the code tool.
    pub runner: Vec<String>,
    pub timeout_secs: f64,
    pub output_cap: usize,
    pub max_concurrent: usize,
    pub max_retries: u32,
}

impl Default for SandboxSection {
    fn default() -> Self {
        let limits = ExecutionLimits::default();
        Self {
            runner: Vec::new(),
            timeout_secs: limits.wall_timeout.as_secs_f64(),
            output_cap: limits.output_cap,
            max_concurrent: 4,
            max_retries: crate::tools::DEFAULT_MAX_RETRIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub mode: Mode,
    pub max_turns: usize,
    pub tools: Vec<String>,
    pub navigator_repairs: u32,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self {
            mode: Mode::Agent,
            max_turns: crate::executor::DEFAULT_MAX_TURNS,
            tools: ToolKind::ALL.iter().map(|k| k.tag_name().to_string()).collect(),
            navigator_repairs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub prompts_dir: Option<PathBuf>,
    pub gateway: GatewaySection,
    pub decoding: DecodingSection,
    pub retrieval: RetrievalConfig,
    pub index: IndexSection,
    pub sandbox: SandboxSection,
    pub agent: AgentSection,
}

fn secs(what: &str, v: f64) -> Result<Duration, ConfigError> {
    Duration::try_from_secs_f64(v)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| ConfigError::Invalid(format!("{what} must be a positive number of seconds")))
}

/// Parse a comma-separated or listed tool set, case-insensitive.
pub fn parse_tools<S: AsRef<str>>(names: &[S]) -> Result<BTreeSet<ToolKind>, ConfigError> {
    names
        .iter()
        .flat_map(|n| n.as_ref().split(','))
        .filter(|n| !n.trim().is_empty())
        .map(|n| n.parse::<ToolKind>().map_err(|e| ConfigError::Invalid(e.to_string())))
        .collect()
}

impl AppConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Read a config file and apply environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        if let Some(dir) = &cfg.prompts_dir {
            if dir.is_relative() {
                if let Some(base) = path.parent() {
                    cfg.prompts_dir = Some(base.join(dir));
                }
            }
        }
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let get = |k: &str| lookup(k).filter(|v| !v.trim().is_empty());
        if let Some(v) = get(ENV_ENDPOINT) {
            self.gateway.endpoint = Some(v);
        }
        if let Some(v) = get(ENV_MODEL) {
            self.gateway.model = Some(v);
        }
        if let Some(v) = get(ENV_API_KEY) {
            self.gateway.api_key = Some(v);
        }
        if let Some(v) = get(ENV_EMBEDDING_ENDPOINT) {
            self.index.embedding_endpoint = Some(v);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.decoding
            .resolve()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.agent.max_turns == 0 {
            return Err(ConfigError::Invalid("agent.max_turns must be at least 1".into()));
        }
        let r = &self.retrieval;
        if r.top_k == 0 {
            return Err(ConfigError::Invalid("retrieval.top_k must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&r.tau) {
            return Err(ConfigError::Invalid("retrieval.tau must be in [-1, 1]".into()));
        }
        if r.chunk_size == 0 || r.chunk_overlap >= r.chunk_size {
            return Err(ConfigError::Invalid("retrieval.chunk_overlap must be smaller than chunk_size".into()));
        }
        if !(r.bm25_k1 >= 0.0) || !(0.0..=1.0).contains(&r.bm25_b) {
            return Err(ConfigError::Invalid("bm25 parameters out of range".into()));
        }
        secs("sandbox.timeout_secs", self.sandbox.timeout_secs)?;
        secs("gateway.timeout_secs", self.gateway.timeout_secs)?;
        parse_tools(&self.agent.tools)?;
        Ok(())
    }

    pub fn pipeline_settings(&self) -> Result<PipelineSettings, ConfigError> {
        self.validate()?;
        Ok(PipelineSettings {
            mode: self.agent.mode,
            max_turns: self.agent.max_turns,
            pool: parse_tools(&self.agent.tools)?,
            decoding: self.decoding.resolve(),
            retrieval: self.retrieval.clone(),
            code_limits: ExecutionLimits {
                wall_timeout: secs("sandbox.timeout_secs", self.sandbox.timeout_secs)?,
                output_cap: self.sandbox.output_cap,
            },
            code_max_retries: self.sandbox.max_retries,
            navigator_repairs: self.agent.navigator_repairs,
        })
    }

    /// Gateway settings; `None` when no endpoint is configured.
    pub fn gateway_config(&self) -> Result<Option<GatewayConfig>, ConfigError> {
        let Some(endpoint) = &self.gateway.endpoint else {
            return Ok(None);
        };
        let model = self.gateway.model.clone().ok_or_else(|| {
            ConfigError::Invalid(format!("gateway.model is required when an endpoint is set (or set {ENV_MODEL})"))
        })?;
        let mut g = GatewayConfig::new(endpoint.clone(), model);
        g.api_key = self.gateway.api_key.clone();
        g.timeout = secs("gateway.timeout_secs", self.gateway.timeout_secs)?;
        g.max_in_flight = self.gateway.max_in_flight.max(1);
        g.retry.max_attempts = self.gateway.max_attempts.max(1);
        g.image_policy = self.gateway.image_policy;
        Ok(Some(g))
    }

    /// JSON copy for run directories; the API key is never included.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<AppConfig, ConfigError> {
        AppConfig::from_toml_str(s, Path::new("test.toml"))
    }

    #[test]
    fn empty_file_is_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, AppConfig::default());
        let s = c.pipeline_settings().unwrap();
        assert_eq!(s.max_turns, 10);
        assert_eq!(s.retrieval.top_k, 8);
        assert_eq!(s.pool.len(), 3);
        assert_eq!(c.gateway_config().unwrap(), None);
    }

    #[test]
    fn sections_and_overrides() {
        let c = parse(
            r#"
            [gateway]
            endpoint = "http://h:8000/v1"
            model = "m"
            [decoding]
            preset = "b"
            temperature = 0.2
            [retrieval]
            top_k = 4
            [agent]
            tools = ["Search", "code"]
            max_turns = 3
            "#,
        )
        .unwrap();
        let s = c.pipeline_settings().unwrap();
        assert_eq!(s.decoding.temperature, 0.2);
        assert_eq!(s.decoding.top_k, 40);
        assert_eq!(s.retrieval.top_k, 4);
        assert_eq!(s.retrieval.tau, 0.9);
        assert_eq!(s.pool, [ToolKind::Search, ToolKind::Code].into());
        assert_eq!(c.gateway_config().unwrap().unwrap().model, "m");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(parse("[agent]\nmax_turn = 3\n"), Err(ConfigError::Parse { .. })));
        let c = parse("[agent]\ntools = [\"browser\"]\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn env_fills_secrets_and_snapshot_hides_key() {
        let mut c = parse("[gateway]\nmodel = \"m\"\n").unwrap();
        c.apply_env(|k| match k {
            ENV_ENDPOINT => Some("http://e/v1".into()),
            ENV_API_KEY => Some("sk-secret".into()),
            _ => None,
        });
        let g = c.gateway_config().unwrap().unwrap();
        assert_eq!(g.api_key.as_deref(), Some("sk-secret"));
        assert!(!c.snapshot().to_string().contains("sk-secret"));
    }

    #[test]
    fn endpoint_without_model_is_an_error() {
        let c = parse("[gateway]\nendpoint = \"http://e\"\n").unwrap();
        assert!(c.gateway_config().is_err());
    }

    #[test]
    fn tool_list_parsing() {
        assert_eq!(parse_tools(&["search,code"]).unwrap().len(), 2);
        assert!(parse_tools(&["search,web"]).is_err());
        assert!(parse_tools::<&str>(&[]).unwrap().is_empty());
    }
}
