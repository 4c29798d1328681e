//! Deterministic in-process backends.
//!
//! All outputs are pure functions of the constructor arguments and the call
//! inputs. Hashing goes through SHA-256 and vector generation through
//! ChaCha8, both of which are platform independent.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_nonempty, BackendError, ChatBackend, ChatRequest, ChatResponse, EmbedBackend, RelationBackend,
    RelationLabel,
};
use crate::chaingen::VqaSample;
use crate::retrieval::Embedding;

fn digest(seed: u64, domain: &str, text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    h.finalize().into()
}

/// Scripted response: fires when the user message contains every needle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: Vec<String>,
    pub response: String,
}

impl MockRule {
    pub fn contains(
        needles: impl IntoIterator<Item = impl Into<String>>,
        response: impl Into<String>,
    ) -> Self {
        Self {
            contains: needles.into_iter().map(Into::into).collect(),
            response: response.into(),
        }
    }

    fn matches(&self, text: &str) -> bool {
        self.contains.iter().all(|n| text.contains(n.as_str()))
    }
}

/// Chat backend answering from an exact-match table, then ordered rules,
/// then a seeded hash of the prompt.
#[derive(Debug, Clone, Default)]
pub struct MockChat {
    seed: u64,
    exact: BTreeMap<String, String>,
    rules: Vec<MockRule>,
    aux_probability: Option<f64>,
}

impl MockChat {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn with_exact(mut self, prompt: impl Into<String>, response: impl Into<String>) -> Self {
        self.exact.insert(prompt.into(), response.into());
        self
    }

    pub fn with_rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_rules(mut self, rules: impl IntoIterator<Item = MockRule>) -> Self {
        self.rules.extend(rules);
        self
    }

    pub fn with_aux_probability(mut self, p: Option<f64>) -> Self {
        self.aux_probability = p;
        self
    }

    fn respond(&self, user: &str) -> String {
        if let Some(r) = self.exact.get(user) {
            return r.clone();
        }
        if let Some(rule) = self.rules.iter().find(|r| r.matches(user)) {
            return rule.response.clone();
        }
        let d = digest(self.seed, "chat", user);
        format!("mock-{}", hex::encode(&d[..6]))
    }
}

impl ChatBackend for MockChat {
    fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        check_nonempty("user message", &req.user)?;
        Ok(ChatResponse {
            text: self.respond(&req.user),
            aux_probability: self.aux_probability,
        })
    }

    fn decomposition_probability(&self, _sample: &VqaSample) -> Result<Option<f64>, BackendError> {
        Ok(self.aux_probability)
    }
}

/// Embeds text by seeding ChaCha8 from a hash of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbed {
    dim: usize,
    seed: u64,
}

impl MockEmbed {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn vector(&self, key: &str) -> Embedding {
        let mut rng = ChaCha8Rng::from_seed(digest(self.seed, "embed", key));
        loop {
            let values: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(e) = Embedding::new(values) {
                return e;
            }
        }
    }
}

impl EmbedBackend for MockEmbed {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, BackendError> {
        check_nonempty("text", text)?;
        Ok(self.vector(text))
    }

    /// Keyed on the locator string, in the same space as text.
    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        check_nonempty("image locator", image_ref)?;
        Ok(self.vector(image_ref))
    }
}

/// Relation backend driven by a rule table; unscripted pairs are
/// independent.
#[derive(Debug, Clone, Default)]
pub struct MockRelation {
    rules: HashMap<(String, String), RelationLabel>,
}

impl MockRelation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rule(mut self, q_i: impl Into<String>, q_j: impl Into<String>, label: RelationLabel) -> Self {
        self.rules.insert((q_i.into(), q_j.into()), label);
        self
    }
}

impl RelationBackend for MockRelation {
    fn classify(&self, q_i: &str, q_j: &str, _image_ref: Option<&str>) -> Result<RelationLabel, BackendError> {
        Ok(self
            .rules
            .get(&(q_i.to_string(), q_j.to_string()))
            .copied()
            .unwrap_or(RelationLabel::Independent))
    }
}
