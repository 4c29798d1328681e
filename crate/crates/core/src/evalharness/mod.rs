//! End-to-end pipeline runner, VQA-accuracy scoring, ablation driver and
//! report emission.

mod metric;
mod pipeline;
mod report;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chaingen::VqaSample;

pub use metric::{normalize_answer, vqa_accuracy};
pub use pipeline::{
    answer_question, run_ablation, run_pipeline, AblationAxes, AnswerTrace, PreparedSample, Stage, StageError,
};
pub use report::{
    emit_report, mean_score, prompt_hash, read_report, report_filename, BundleSummary, ChainTrace, EvalRecord,
    EvalReport, RecordTrace, TraceHit,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("gold answer list is empty")]
    EmptyGold,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset line {line}: {detail}")]
    DatasetLine { line: usize, detail: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report format error: {0}")]
    Format(String),
    #[error("worker pool: {0}")]
    WorkerPool(String),
}

/// Reads a JSON-lines dataset. Blank lines are skipped; every sample needs
/// at least one gold answer.
pub fn load_dataset(path: &Path) -> Result<Vec<VqaSample>, EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: VqaSample = serde_json::from_str(&line).map_err(|e| EvalError::DatasetLine {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if sample.gold_answers.is_empty() {
            return Err(EvalError::DatasetLine {
                line: i + 1,
                detail: "gold_answers is empty".into(),
            });
        }
        if !seen.insert(sample.sample_id.clone()) {
            return Err(EvalError::DuplicateSample(sample.sample_id));
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    Ok(samples)
}

/// Serializable snapshot of the settings a report was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub seed: u64,
    pub pipeline: crate::config::PipelineConfig,
}
