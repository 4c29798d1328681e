use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pipeline::StageError;
use super::{ConfigSnapshot, EvalError};
use crate::chaingen::{CoVqdChain, SubQa};
use crate::promptctor::PromptOrder;
use crate::retrieval::{RetrievalBundle, RetrievalMode};

/// SHA-256 of the assembled prompt, hex encoded.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub decomposed: bool,
    pub sub_qas: Vec<SubQa>,
}

impl From<&CoVqdChain> for ChainTrace {
    fn from(c: &CoVqdChain) -> Self {
        Self {
            decomposed: c.decomposed(),
            sub_qas: c.sub_qas().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHit {
    pub entry_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub refined_caption: String,
    pub patch_refs: Vec<String>,
    pub searched_images: Vec<String>,
    pub triples: Vec<TraceHit>,
}

impl From<&RetrievalBundle> for BundleSummary {
    fn from(b: &RetrievalBundle) -> Self {
        Self {
            refined_caption: b.refined_caption.clone(),
            patch_refs: b.patch_refs.clone(),
            searched_images: b.searched_images.clone(),
            triples: b
                .triples
                .iter()
                .map(|t| TraceHit {
                    entry_id: t.entry_id.clone(),
                    score: t.score,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordTrace {
    pub chain: Option<ChainTrace>,
    pub bundle: Option<BundleSummary>,
    pub prompt_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub predicted: String,
    pub gold_answers: Vec<String>,
    pub score: f64,
    pub error: Option<StageError>,
    pub trace: RecordTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ConfigSnapshot,
    pub mode: RetrievalMode,
    pub budget: usize,
    pub order: PromptOrder,
    pub aggregate: f64,
    pub records: Vec<EvalRecord>,
}

pub fn mean_score(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.score).sum::<f64>() / records.len() as f64
}

pub fn report_filename(mode: RetrievalMode, budget: usize, order: PromptOrder) -> String {
    format!("report_mode-{}_k{}_order-{}.json", mode.slug(), budget, order)
}

/// Writes `report` as pretty JSON into `dir` and returns the file path.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<PathBuf, EvalError> {
    let path = dir.join(report_filename(report.mode, report.budget, report.order));
    let mut text = serde_json::to_string_pretty(report).map_err(|e| EvalError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Format(format!("{}: {e}", path.display())))
}
