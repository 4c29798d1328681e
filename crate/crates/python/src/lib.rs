//! Python bindings for the chainrag pipeline, losses and helpers.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use chainrag_core::backends::Backends;
use chainrag_core::chaingen::{parse_chain as core_parse_chain, VqaSample};
use chainrag_core::config::Config;
use chainrag_core::evalharness::{self, answer_question};
use chainrag_core::prefopt::{self, DpoSample, ImplicationGraph, LossWeights, SequenceLogProb};
use chainrag_core::promptctor::{self, PromptBundle, PromptOrder};
use chainrag_core::retrieval::{self, Embedding, KnowledgeEntry, QaeTriple, RetrievalMode};

create_exception!(chainrag, ChainragError, PyValueError);

fn err(e: impl std::fmt::Display) -> PyErr {
    ChainragError::new_err(e.to_string())
}

fn sample(question: &str, image_ref: &str) -> PyResult<VqaSample> {
    VqaSample::new("py", question, image_ref).map_err(err)
}

fn dpo_sample(w_policy: f64, w_ref: f64, l_policy: f64, l_ref: f64) -> PyResult<DpoSample> {
    DpoSample::new(w_policy, w_ref, l_policy, l_ref).map_err(err)
}

fn logprob(v: f64) -> PyResult<SequenceLogProb> {
    SequenceLogProb::new(v).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (w_policy, w_ref, l_policy, l_ref, beta_kl = 0.5))]
fn dpo_loss(w_policy: f64, w_ref: f64, l_policy: f64, l_ref: f64, beta_kl: f64) -> PyResult<f64> {
    prefopt::dpo_loss(&dpo_sample(w_policy, w_ref, l_policy, l_ref)?, beta_kl).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (policy, reference, beta_kl = 0.5))]
fn ancpo_loss(policy: f64, reference: f64, beta_kl: f64) -> PyResult<f64> {
    prefopt::ancpo_loss(logprob(policy)?, logprob(reference)?, beta_kl).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (reward, policy, reference, beta_kl = 0.5))]
fn po_loss(reward: f64, policy: f64, reference: f64, beta_kl: f64) -> PyResult<f64> {
    prefopt::po_loss(reward, logprob(policy)?, logprob(reference)?, beta_kl).map_err(err)
}

/// DPO plus the anchor term. Without an explicit anchor, the preferred
/// sequence is used as the anchor.
#[pyfunction]
#[pyo3(signature = (w_policy, w_ref, l_policy, l_ref, anchor = None, beta_kl = 0.5, gamma_anchor = 1.0))]
fn lidpo_loss(
    w_policy: f64,
    w_ref: f64,
    l_policy: f64,
    l_ref: f64,
    anchor: Option<(f64, f64)>,
    beta_kl: f64,
    gamma_anchor: f64,
) -> PyResult<f64> {
    let s = dpo_sample(w_policy, w_ref, l_policy, l_ref)?;
    let s = match anchor {
        Some((policy, reference)) => s.with_anchor(policy, reference).map_err(err)?,
        None => s.with_preferred_anchor(),
    };
    let weights = LossWeights {
        beta_kl,
        gamma_anchor,
        ..LossWeights::default()
    };
    prefopt::lidpo_loss(&s, &weights).map_err(err)
}

/// Identity checks plus finite-difference gradient checks on random points.
#[pyfunction]
#[pyo3(signature = (trials = 100, seed = 0))]
fn run_loss_suite(py: Python<'_>, trials: usize, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let report = prefopt::run_loss_suite(trials, seed).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("passed", report.passed())?;
    out.set_item("trials", report.trials)?;
    out.set_item("gradient_checks", report.gradient_checks)?;
    out.set_item("max_rel_error", report.max_rel_error)?;
    let identities: Vec<(String, f64, f64, bool)> = report
        .identities
        .iter()
        .map(|c| (c.name.to_string(), c.actual, c.expected, c.passed))
        .collect();
    out.set_item("identities", identities)?;
    Ok(out)
}

/// Preference pairs for an implication DAG over nodes `1..=node_count`.
/// Returns `(preferred, rejected)` orders; the base order defaults to the
/// stable topological order.
#[pyfunction]
#[pyo3(signature = (node_count, edges, base_order = None))]
fn build_preference_pairs(
    node_count: usize,
    edges: Vec<(usize, usize)>,
    base_order: Option<Vec<usize>>,
) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
    let graph = ImplicationGraph::new(node_count, edges).map_err(err)?;
    let base = base_order.unwrap_or_else(|| graph.stable_topological_order());
    let pairs = prefopt::build_preference_pairs(&graph, &base, "py").map_err(err)?;
    Ok(pairs.into_iter().map(|p| (p.preferred_order, p.rejected_order)).collect())
}

/// Parses `Q: ... | A: ...` lines into `(sub_question, sub_answer)` tuples.
#[pyfunction]
#[pyo3(signature = (raw, question, image_ref = ""))]
fn parse_chain(raw: &str, question: &str, image_ref: &str) -> PyResult<Vec<(String, String)>> {
    let chain = core_parse_chain(raw, &sample(question, image_ref)?).map_err(err)?;
    Ok(chain
        .sub_qas()
        .iter()
        .map(|qa| (qa.sub_question.clone(), qa.sub_answer.clone()))
        .collect())
}

#[pyfunction]
fn normalize_answer(text: &str) -> String {
    evalharness::normalize_answer(text)
}

#[pyfunction]
fn vqa_accuracy(predicted: &str, gold_answers: Vec<String>) -> PyResult<f64> {
    evalharness::vqa_accuracy(predicted, &gold_answers).map_err(err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    retrieval::cosine_similarity(&a, &b).map_err(err)
}

/// Renders the answer prompt. `knowledge` holds
/// `(sub_question, sub_answer, explanation, score)` tuples in chain order.
#[pyfunction]
#[pyo3(signature = (question, knowledge, caption = String::new(), patches = Vec::new(), head = String::new(), order = "C_I_K", budget = promptctor::DEFAULT_KNOWLEDGE_BUDGET))]
fn assemble_prompt(
    question: String,
    knowledge: Vec<(String, String, String, f64)>,
    caption: String,
    patches: Vec<String>,
    head: String,
    order: &str,
    budget: usize,
) -> PyResult<String> {
    let order: PromptOrder = order.parse().map_err(err)?;
    let bundle = PromptBundle {
        head,
        refined_caption: caption,
        patch_refs: patches,
        knowledge: knowledge
            .into_iter()
            .enumerate()
            .map(|(i, (sub_question, sub_answer, explanation, score))| QaeTriple {
                sub_question,
                sub_answer,
                explanation,
                score,
                entry_id: format!("k{i}"),
            })
            .collect(),
        question,
        searched_images: Vec::new(),
    };
    Ok(promptctor::assemble_prompt(&bundle, order, budget))
}

/// Exact cosine index over explanation and image entries.
#[pyclass(module = "chainrag", frozen)]
struct VectorIndex {
    inner: retrieval::VectorIndex,
}

#[pymethods]
impl VectorIndex {
    /// Builds an index of explanation entries from ids, texts and vectors.
    #[new]
    fn new(ids: Vec<String>, texts: Vec<String>, vectors: Vec<Vec<f64>>) -> PyResult<Self> {
        if ids.len() != texts.len() || ids.len() != vectors.len() {
            return Err(err("ids, texts and vectors must have the same length"));
        }
        let entries = ids
            .into_iter()
            .zip(texts)
            .zip(vectors)
            .map(|((id, text), v)| Ok(KnowledgeEntry::explanation(id, text, Embedding::new(v).map_err(err)?)))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: retrieval::VectorIndex::build(entries).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, expected_dim = None))]
    fn load(path: PathBuf, expected_dim: Option<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: retrieval::VectorIndex::load(&path, expected_dim).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(entry_id, score)` for the `k` nearest entries, best first.
    fn topk(&self, query: Vec<f64>, k: usize) -> PyResult<Vec<(String, f64)>> {
        let q = Embedding::new(query).map_err(err)?;
        let hits = self.inner.topk(&q, k, None).map_err(err)?;
        Ok(hits.into_iter().map(|h| (h.entry_id, h.score)).collect())
    }
}

/// Config-driven question answering over a saved index.
#[pyclass(module = "chainrag", frozen)]
struct Pipeline {
    cfg: Config,
    backends: Backends,
    index: retrieval::VectorIndex,
}

#[pymethods]
impl Pipeline {
    #[new]
    fn new(config_path: PathBuf, index_path: PathBuf) -> PyResult<Self> {
        let cfg = Config::load(&config_path).map_err(err)?;
        let backends = cfg.build_backends().map_err(err)?;
        let index = retrieval::VectorIndex::load(&index_path, Some(backends.embed.dim())).map_err(err)?;
        Ok(Self { cfg, backends, index })
    }

    /// Builds the index in memory, embedding entries that lack a vector
    /// with the configured backend.
    #[staticmethod]
    fn from_corpus(config_path: PathBuf, corpus_path: PathBuf) -> PyResult<Self> {
        let cfg = Config::load(&config_path).map_err(err)?;
        let backends = cfg.build_backends().map_err(err)?;
        let entries = retrieval::load_corpus(&corpus_path)
            .map_err(err)?
            .into_iter()
            .map(|r| r.into_entry(Some(backends.embed.as_ref())))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let index = retrieval::VectorIndex::build(entries).map_err(err)?;
        Ok(Self { cfg, backends, index })
    }

    #[getter]
    fn index_len(&self) -> usize {
        self.index.len()
    }

    /// Answers one question and returns the answer with its chain and prompt.
    #[pyo3(signature = (question, image_ref, caption = None, mode = None, budget = None, order = None))]
    fn ask<'py>(
        &self,
        py: Python<'py>,
        question: &str,
        image_ref: &str,
        caption: Option<String>,
        mode: Option<&str>,
        budget: Option<usize>,
        order: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut s = sample(question, image_ref)?;
        if let Some(c) = caption {
            s = s.with_caption(c);
        }
        let mut cfg = self.cfg.clone();
        if let Some(m) = mode {
            cfg.pipeline.retrieval.mode = m.parse::<RetrievalMode>().map_err(err)?;
        }
        if let Some(b) = budget {
            cfg.pipeline.prompt.budget = b;
        }
        if let Some(o) = order {
            cfg.pipeline.prompt.order = o.parse().map_err(err)?;
        }
        let trace = py
            .detach(|| answer_question(&s, &cfg, &self.backends, &self.index))
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("answer", trace.answer)?;
        out.set_item("prompt", trace.prompt)?;
        out.set_item("decomposed", trace.chain.decomposed())?;
        let chain: Vec<(String, String)> = trace
            .chain
            .sub_qas()
            .iter()
            .map(|qa| (qa.sub_question.clone(), qa.sub_answer.clone()))
            .collect();
        out.set_item("chain", chain)?;
        let triples: Vec<(String, f64)> = trace.bundle.triples.into_iter().map(|t| (t.entry_id, t.score)).collect();
        out.set_item("triples", triples)?;
        Ok(out)
    }
}

#[pymodule]
fn chainrag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ChainragError", m.py().get_type::<ChainragError>())?;
    m.add_class::<VectorIndex>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ancpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(po_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lidpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_loss_suite, m)?)?;
    m.add_function(wrap_pyfunction!(build_preference_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(parse_chain, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(vqa_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_prompt, m)?)?;
    Ok(())
}
