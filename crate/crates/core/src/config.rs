//! Versioned TOML configuration: backend endpoints, retry policy, embedding
//! dimension, seeds and pipeline defaults.
//!
//! ```toml
//! version = 1
//! seed = 7
//!
//! [chat]
//! kind = "http"                     # or "mock"
//! base_url = "http://localhost:8000/v1"
//! model = "llava"
//! retry = { max_retries = 3, initial_backoff_ms = 250, timeout_ms = 30000 }
//!
//! [embedding]
//! kind = "mock"
//! dim = 64
//!
//! [pipeline.retrieval]
//! mode = "V+T"
//! ```
//!
//! API keys are never read from the file; set `CHAINRAG_API_KEY`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendError, Backends, ChatParams, HttpChat, HttpEmbed, HttpRelation, MockChat, MockEmbed, MockRelation,
    MockRule, RelationLabel, RetryPolicy,
};
use crate::chaingen::ChainSettings;
use crate::promptctor::{PromptOptions, DEFAULT_ANSWER_HEAD};
use crate::retrieval::RetrievalConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const API_KEY_ENV: &str = "CHAINRAG_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported config version {0} (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockChatConfig {
    pub aux_probability: Option<f64>,
    pub exact: BTreeMap<String, String>,
    pub rules: Vec<MockRule>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model: String,
    pub retry: RetryPolicy,
    /// Ask the model for a yes/no decomposition probability before decomposing.
    pub decomposition_probe: bool,
    pub mock: MockChatConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: BackendKind,
    pub dim: usize,
    pub text_url: Option<String>,
    pub image_url: Option<String>,
    pub model: Option<String>,
    pub retry: RetryPolicy,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            dim: 64,
            text_url: None,
            image_url: None,
            model: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationRule {
    pub q_i: String,
    pub q_j: String,
    pub label: RelationLabel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationConfig {
    pub kind: BackendKind,
    pub url: Option<String>,
    pub retry: RetryPolicy,
    pub rules: Vec<RelationRule>,
}

/// Everything that shapes a pipeline run apart from the backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub chain: ChainSettings,
    pub retrieval: RetrievalConfig,
    pub prompt: PromptOptions,
    pub answer_head: String,
    pub answer_params: ChatParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chain: ChainSettings::default(),
            retrieval: RetrievalConfig::default(),
            prompt: PromptOptions::default(),
            answer_head: DEFAULT_ANSWER_HEAD.to_string(),
            answer_params: ChatParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.chain;
        if !(0.0..=1.0).contains(&c.threshold) {
            return Err(ConfigError::Invalid(format!("threshold {} outside [0, 1]", c.threshold)));
        }
        if !(0.0..=1.0).contains(&c.fallback_probability) {
            return Err(ConfigError::Invalid(format!(
                "fallback_probability {} outside [0, 1]",
                c.fallback_probability
            )));
        }
        if c.max_n == 0 {
            return Err(ConfigError::Invalid("max_n must be at least 1".into()));
        }
        if self.prompt.budget == 0 {
            return Err(ConfigError::Invalid("prompt budget must be at least 1".into()));
        }
        if self.answer_head.trim().is_empty() {
            return Err(ConfigError::Invalid("answer_head is empty".into()));
        }
        self.retrieval
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub seed: u64,
    pub chat: ChatConfig,
    pub embedding: EmbeddingConfig,
    pub relation: RelationConfig,
    pub pipeline: PipelineConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            chat: ChatConfig::default(),
            embedding: EmbeddingConfig::default(),
            relation: RelationConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Version(cfg.version));
        }
        if cfg.embedding.dim == 0 {
            return Err(ConfigError::Invalid("embedding.dim must be positive".into()));
        }
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn build_backends(&self) -> Result<Backends, ConfigError> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let require = |url: &Option<String>, what: &str| {
            url.clone()
                .ok_or_else(|| ConfigError::Invalid(format!("{what} is required for http backends")))
        };

        let chat: Arc<dyn crate::backends::ChatBackend> = match self.chat.kind {
            BackendKind::Mock => Arc::new(
                self.chat
                    .mock
                    .exact
                    .iter()
                    .fold(MockChat::new(self.seed), |m, (k, v)| m.with_exact(k.clone(), v.clone()))
                    .with_rules(self.chat.mock.rules.iter().cloned())
                    .with_aux_probability(self.chat.mock.aux_probability),
            ),
            BackendKind::Http => Arc::new(
                HttpChat::new(
                    &require(&self.chat.base_url, "chat.base_url")?,
                    self.chat.model.clone(),
                    api_key.clone(),
                    self.chat.retry.clone(),
                )?
                .with_decomposition_probe(self.chat.decomposition_probe),
            ),
        };

        let e = &self.embedding;
        let embed: Arc<dyn crate::backends::EmbedBackend> = match e.kind {
            BackendKind::Mock => Arc::new(MockEmbed::new(e.dim, self.seed)),
            BackendKind::Http => {
                let text_url = require(&e.text_url, "embedding.text_url")?;
                let image_url = e.image_url.clone().unwrap_or_else(|| text_url.clone());
                Arc::new(HttpEmbed::new(
                    text_url,
                    image_url,
                    e.model.clone(),
                    e.dim,
                    api_key.clone(),
                    e.retry.clone(),
                )?)
            }
        };

        let r = &self.relation;
        let relation: Arc<dyn crate::backends::RelationBackend> = match r.kind {
            BackendKind::Mock => Arc::new(
                r.rules
                    .iter()
                    .fold(MockRelation::new(), |m, rule| m.with_rule(&rule.q_i, &rule.q_j, rule.label)),
            ),
            BackendKind::Http => Arc::new(HttpRelation::new(
                require(&r.url, "relation.url")?,
                api_key,
                r.retry.clone(),
            )?),
        };

        Ok(Backends { chat, embed, relation })
    }
}
