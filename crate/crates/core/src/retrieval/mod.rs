//! Knowledge retrieval over a local corpus.
//!
//! [`VectorIndex`] is an exact cosine-similarity index. On top of it sit the
//! three retrieval processes used by the pipeline: whole-image retrieval,
//! multimodal (caption and patch) retrieval filtered by the question, and
//! chain-guided retrieval producing one question-answer-explanation triple
//! per sub-question.

mod embedding;
mod index;
mod process;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use embedding::{cosine_similarity, Embedding, NORM_TOLERANCE};
pub use index::{
    load_corpus, EntryKind, KnowledgeEntry, KnowledgeRecord, ScoredId, VectorIndex, INDEX_FORMAT,
    INDEX_VERSION,
};
pub use process::{
    covqd_guided_retrieve, multimodal_retrieve, original_image_retrieve, relevance_filter, retrieve_bundle,
    MultimodalHits, PatchHit,
};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding contains NaN or infinite values")]
    NonFinite,
    #[error("embedding is empty")]
    EmptyEmbedding,
    #[error("duplicate entry id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("entry {entry_id:?} of kind {kind:?} lacks its text or image locator")]
    MissingPayload { entry_id: String, kind: EntryKind },
    #[error("entry {0:?} has no embedding and no embedding backend was given")]
    MissingEmbedding(String),
    #[error("unknown entry id {0:?}")]
    UnknownId(String),
    #[error("corpus has no explanation_text entries")]
    NoExplanations,
    #[error("corpus line {line}: {detail}")]
    CorpusLine { line: usize, detail: String },
    #[error("index file: {0}")]
    IndexFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding backend: {0}")]
    Backend(String),
    #[error("invalid retrieval config: {0}")]
    Config(String),
}

/// Which feature channels retrieval may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalMode {
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "V+T", alias = "V_plus_T")]
    VisualText,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [RetrievalMode::Text, RetrievalMode::Visual, RetrievalMode::VisualText];

    pub fn uses_text(self) -> bool {
        matches!(self, RetrievalMode::Text | RetrievalMode::VisualText)
    }

    pub fn uses_visual(self) -> bool {
        matches!(self, RetrievalMode::Visual | RetrievalMode::VisualText)
    }

    /// Token safe for file names.
    pub fn slug(self) -> &'static str {
        match self {
            RetrievalMode::Text => "T",
            RetrievalMode::Visual => "V",
            RetrievalMode::VisualText => "VT",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::Text => "T",
            RetrievalMode::Visual => "V",
            RetrievalMode::VisualText => "V+T",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "T" | "t" => Ok(RetrievalMode::Text),
            "V" | "v" => Ok(RetrievalMode::Visual),
            "V+T" | "v+t" | "VT" | "V_plus_T" => Ok(RetrievalMode::VisualText),
            other => Err(format!("unknown retrieval mode {other:?} (expected T, V or V+T)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_image: usize,
    pub k_multimodal: usize,
    pub filter_tau: f64,
    pub mode: RetrievalMode,
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k_image == 0 || self.k_multimodal == 0 {
            return Err(RetrievalError::Config("k values must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.filter_tau) {
            return Err(RetrievalError::Config(format!(
                "filter_tau {} is outside [-1, 1]",
                self.filter_tau
            )));
        }
        Ok(())
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_image: 3,
            k_multimodal: 3,
            filter_tau: 0.2,
            mode: RetrievalMode::VisualText,
        }
    }
}

/// Question-answer-explanation triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaeTriple {
    pub sub_question: String,
    pub sub_answer: String,
    pub explanation: String,
    pub score: f64,
    pub entry_id: String,
}

/// Everything retrieval contributes to the final prompt.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalBundle {
    pub refined_caption: String,
    pub patch_refs: Vec<String>,
    pub searched_images: Vec<String>,
    pub triples: Vec<QaeTriple>,
}
