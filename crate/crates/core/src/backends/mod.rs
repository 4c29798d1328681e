//! Model backends: chat completion, text/image embedding and sub-question
//! relation prediction.
//!
//! Every backend is a `Send + Sync` trait object so a single handle can be
//! shared by the evaluation worker pool. Two families of implementations are
//! provided: deterministic in-process mocks ([`mock`]) and HTTP JSON clients
//! ([`http`]) speaking the chat-completion wire format of common open
//! inference servers.

pub mod http;
pub mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chaingen::VqaSample;
use crate::retrieval::Embedding;

pub use http::{HttpChat, HttpEmbed, HttpRelation, RetryPolicy};
pub use mock::{MockChat, MockEmbed, MockRelation, MockRule};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("request timed out after {attempts} attempt(s): {detail}")]
    Timeout { attempts: u32, detail: String },
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unmappable relation label {0:?}")]
    UnmappableLabel(String),
}

impl BackendError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, BackendError::Timeout { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 256,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
    pub image_refs: Vec<String>,
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn new(user: impl Into<String>) -> Result<Self, BackendError> {
        let user = user.into();
        if user.trim().is_empty() {
            return Err(BackendError::InvalidRequest("user message is empty".into()));
        }
        Ok(Self {
            system: None,
            user,
            image_refs: Vec::new(),
            params: ChatParams::default(),
        })
    }

    pub fn with_images(mut self, refs: impl IntoIterator<Item = String>) -> Self {
        self.image_refs.extend(refs);
        self
    }

    pub fn with_params(mut self, params: ChatParams) -> Self {
        self.params = params;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    /// Completion text. May be empty when the model refuses.
    pub text: String,
    /// Decomposition probability, for backends able to supply one.
    pub aux_probability: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationLabel {
    Implies,
    ImpliedBy,
    Independent,
}

impl RelationLabel {
    /// Maps a classifier label string. Accepts the NLI vocabulary as well.
    pub fn parse(label: &str) -> Result<Self, BackendError> {
        match label.trim().to_ascii_lowercase().as_str() {
            "implies" | "entailment" | "entails" => Ok(RelationLabel::Implies),
            "implied_by" | "reverse_entailment" => Ok(RelationLabel::ImpliedBy),
            "independent" | "neutral" | "contradiction" => Ok(RelationLabel::Independent),
            _ => Err(BackendError::UnmappableLabel(label.to_string())),
        }
    }

    /// Directed edge between the 1-based positions `i` and `j` implied by
    /// this label, if any.
    pub fn edge(self, i: usize, j: usize) -> Option<(usize, usize)> {
        match self {
            RelationLabel::Implies => Some((i, j)),
            RelationLabel::ImpliedBy => Some((j, i)),
            RelationLabel::Independent => None,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Probability that `sample` needs decomposition. `None` means the
    /// backend has no opinion and the configured fallback applies.
    fn decomposition_probability(&self, _sample: &VqaSample) -> Result<Option<f64>, BackendError> {
        Ok(None)
    }
}

pub trait EmbedBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Embedding, BackendError>;
    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError>;
}

pub trait RelationBackend: Send + Sync {
    /// Raw classification of the ordered pair. Callers should use
    /// [`RelationBackend::predict_relation`].
    fn classify(
        &self,
        q_i: &str,
        q_j: &str,
        image_ref: Option<&str>,
    ) -> Result<RelationLabel, BackendError>;

    fn predict_relation(
        &self,
        q_i: &str,
        q_j: &str,
        image_ref: Option<&str>,
    ) -> Result<RelationLabel, BackendError> {
        if q_i.trim().is_empty() || q_j.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty sub-question".into()));
        }
        // reflexive convention
        if q_i.trim() == q_j.trim() {
            return Ok(RelationLabel::Implies);
        }
        self.classify(q_i, q_j, image_ref)
    }
}

pub(crate) fn check_nonempty(what: &str, text: &str) -> Result<(), BackendError> {
    if text.trim().is_empty() {
        Err(BackendError::InvalidRequest(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

/// The three backend handles used by the pipeline.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embed: Arc<dyn EmbedBackend>,
    pub relation: Arc<dyn RelationBackend>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("embed_dim", &self.embed.dim())
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relation_label_edges() {
        assert_eq!(RelationLabel::Implies.edge(1, 2), Some((1, 2)));
        assert_eq!(RelationLabel::ImpliedBy.edge(1, 2), Some((2, 1)));
        assert_eq!(RelationLabel::Independent.edge(1, 2), None);
    }

    #[test]
    fn relation_label_parsing() {
        assert_eq!(RelationLabel::parse("Entailment").unwrap(), RelationLabel::Implies);
        assert_eq!(RelationLabel::parse("implied_by").unwrap(), RelationLabel::ImpliedBy);
        assert!(matches!(
            RelationLabel::parse("maybe"),
            Err(BackendError::UnmappableLabel(_))
        ));
    }

    #[test]
    fn empty_chat_request_rejected() {
        assert!(ChatRequest::new("  ").is_err());
    }
}
