use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Embedding, RetrievalError};
use crate::backends::EmbedBackend;

pub const INDEX_FORMAT: &str = "chainrag-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    ExplanationText,
    ImageDoc,
}

/// A corpus line as ingested, before embeddings are guaranteed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub entry_id: String,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entry_id: String,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub embedding: Embedding,
}

impl KnowledgeEntry {
    pub fn explanation(id: impl Into<String>, text: impl Into<String>, embedding: Embedding) -> Self {
        Self {
            entry_id: id.into(),
            kind: EntryKind::ExplanationText,
            text: Some(text.into()),
            image_ref: None,
            embedding,
        }
    }

    pub fn image(id: impl Into<String>, image_ref: impl Into<String>, embedding: Embedding) -> Self {
        Self {
            entry_id: id.into(),
            kind: EntryKind::ImageDoc,
            text: None,
            image_ref: Some(image_ref.into()),
            embedding,
        }
    }

    fn validate(&self) -> Result<(), RetrievalError> {
        let ok = match self.kind {
            EntryKind::ExplanationText => self.text.as_deref().is_some_and(|t| !t.trim().is_empty()),
            EntryKind::ImageDoc => self
                .image_ref
                .as_deref()
                .is_some_and(|r| !r.trim().is_empty()),
        };
        if ok {
            Ok(())
        } else {
            Err(RetrievalError::MissingPayload {
                entry_id: self.entry_id.clone(),
                kind: self.kind,
            })
        }
    }
}

impl KnowledgeRecord {
    /// Converts into an entry, embedding the payload through `embed` when the
    /// record has no embedding and a backend is supplied.
    pub fn into_entry(self, embed: Option<&dyn EmbedBackend>) -> Result<KnowledgeEntry, RetrievalError> {
        let embedding = match (self.embedding, embed) {
            (Some(values), _) => Embedding::new(values)?,
            (None, Some(backend)) => {
                let result = match self.kind {
                    EntryKind::ExplanationText => backend.embed_text(self.text.as_deref().unwrap_or("")),
                    EntryKind::ImageDoc => backend.embed_image(self.image_ref.as_deref().unwrap_or("")),
                };
                result.map_err(|e| RetrievalError::Backend(e.to_string()))?
            }
            (None, None) => return Err(RetrievalError::MissingEmbedding(self.entry_id)),
        };
        let entry = KnowledgeEntry {
            entry_id: self.entry_id,
            kind: self.kind,
            text: self.text,
            image_ref: self.image_ref,
            embedding,
        };
        entry.validate()?;
        Ok(entry)
    }
}

/// Reads a JSON-lines corpus. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn load_corpus(path: &Path) -> Result<Vec<KnowledgeRecord>, RetrievalError> {
    let file = fs::File::open(path).map_err(|e| RetrievalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RetrievalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KnowledgeRecord = serde_json::from_str(&line).map_err(|e| RetrievalError::CorpusLine {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// A scored hit returned by [`VectorIndex::topk`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub entry_id: String,
    pub score: f64,
}

/// Immutable exact-search index over knowledge entries.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    entries: Vec<KnowledgeEntry>,
    dim: usize,
    by_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    dim: usize,
    entries: Vec<KnowledgeEntry>,
}

// Ordering where `Greater` means "ranks earlier": higher score, then
// lexicographically smaller id.
struct Ranked<'a> {
    score: f64,
    id: &'a str,
    pos: usize,
}

impl Ranked<'_> {
    fn rank_cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked<'_> {}
impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

impl VectorIndex {
    pub fn build(entries: Vec<KnowledgeEntry>) -> Result<Self, RetrievalError> {
        let dim = entries.first().ok_or(RetrievalError::EmptyCorpus)?.embedding.dim();
        let mut by_id = HashMap::with_capacity(entries.len());
        for (pos, entry) in entries.iter().enumerate() {
            entry.validate()?;
            if entry.embedding.dim() != dim {
                return Err(RetrievalError::DimMismatch {
                    expected: dim,
                    found: entry.embedding.dim(),
                });
            }
            if by_id.insert(entry.entry_id.clone(), pos).is_some() {
                return Err(RetrievalError::DuplicateId(entry.entry_id.clone()));
            }
        }
        Ok(Self { entries, dim, by_id })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn get(&self, entry_id: &str) -> Option<&KnowledgeEntry> {
        self.by_id.get(entry_id).map(|&i| &self.entries[i])
    }

    pub fn count_kind(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    /// Exact top-`k` by cosine similarity, descending, ties broken by
    /// ascending entry id.
    pub fn topk(
        &self,
        query: &Embedding,
        k: usize,
        kind_filter: Option<EntryKind>,
    ) -> Result<Vec<ScoredId>, RetrievalError> {
        self.topk_excluding(query, k, kind_filter, &HashSet::new())
    }

    pub(crate) fn topk_excluding(
        &self,
        query: &Embedding,
        k: usize,
        kind_filter: Option<EntryKind>,
        exclude: &HashSet<&str>,
    ) -> Result<Vec<ScoredId>, RetrievalError> {
        if query.dim() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<Reverse<Ranked<'_>>> = BinaryHeap::with_capacity(k + 1);
        for (pos, entry) in self.entries.iter().enumerate() {
            if kind_filter.is_some_and(|kind| kind != entry.kind) || exclude.contains(entry.entry_id.as_str()) {
                continue;
            }
            let cand = Ranked {
                score: query.cosine(&entry.embedding)?,
                id: &entry.entry_id,
                pos,
            };
            if heap.len() < k {
                heap.push(Reverse(cand));
            } else if let Some(Reverse(worst)) = heap.peek() {
                if cand > *worst {
                    heap.pop();
                    heap.push(Reverse(cand));
                }
            }
        }
        // ascending Reverse order == descending rank
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|Reverse(r)| ScoredId {
                entry_id: self.entries[r.pos].entry_id.clone(),
                score: r.score,
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        let file = IndexFile {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            dim: self.dim,
            entries: self.entries.clone(),
        };
        serde_json::to_string(&file).expect("index serializes")
    }

    /// Parses a persisted index. With `expected_dim`, an index of another
    /// dimension is rejected.
    pub fn from_json(text: &str, expected_dim: Option<usize>) -> Result<Self, RetrievalError> {
        let file: IndexFile =
            serde_json::from_str(text).map_err(|e| RetrievalError::IndexFormat(e.to_string()))?;
        if file.format != INDEX_FORMAT {
            return Err(RetrievalError::IndexFormat(format!("unknown format {:?}", file.format)));
        }
        if file.version != INDEX_VERSION {
            return Err(RetrievalError::IndexFormat(format!(
                "unsupported version {} (expected {INDEX_VERSION})",
                file.version
            )));
        }
        if let Some(expected) = expected_dim {
            if expected != file.dim {
                return Err(RetrievalError::DimMismatch {
                    expected,
                    found: file.dim,
                });
            }
        }
        let index = Self::build(file.entries)?;
        if index.dim != file.dim {
            return Err(RetrievalError::DimMismatch {
                expected: file.dim,
                found: index.dim,
            });
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        fs::write(path, self.to_json()).map_err(|e| RetrievalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self, RetrievalError> {
        let text = fs::read_to_string(path).map_err(|e| RetrievalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text, expected_dim)
    }
}
