use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{mean_score, prompt_hash, BundleSummary, ChainTrace, EvalRecord, EvalReport, RecordTrace};
use super::{vqa_accuracy, ConfigSnapshot, EvalError};
use crate::backends::{Backends, ChatRequest};
use crate::chaingen::{generate_chain, CoVqdChain, VqaSample};
use crate::config::Config;
use crate::promptctor::{assemble_prompt_with, PromptBundle, PromptOptions, PromptOrder};
use crate::retrieval::{retrieve_bundle, RetrievalBundle, RetrievalConfig, RetrievalMode, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Chain,
    Retrieval,
    Answer,
    Score,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Chain => "chain",
            Stage::Retrieval => "retrieval",
            Stage::Answer => "answer",
            Stage::Score => "score",
        })
    }
}

/// A failure captured in a record instead of aborting the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{stage} stage failed: {message}")]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

impl StageError {
    fn new(stage: Stage, err: impl fmt::Display) -> Self {
        Self {
            stage,
            message: err.to_string(),
        }
    }
}

/// Chain and per-mode retrieval results for one sample, computed once and
/// shared by every budget/order variant.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: VqaSample,
    pub chain: Result<CoVqdChain, StageError>,
    bundles: Vec<(RetrievalMode, Result<RetrievalBundle, StageError>)>,
}

impl PreparedSample {
    pub fn prepare(
        sample: &VqaSample,
        cfg: &Config,
        backends: &Backends,
        index: &VectorIndex,
        modes: &[RetrievalMode],
    ) -> Self {
        let chain = generate_chain(sample, backends.chat.as_ref(), &cfg.pipeline.chain)
            .map_err(|e| StageError::new(Stage::Chain, e));
        let mut bundles = Vec::new();
        if let Ok(chain) = &chain {
            for &mode in modes {
                if bundles.iter().any(|(m, _)| *m == mode) {
                    continue;
                }
                let rcfg = RetrievalConfig {
                    mode,
                    ..cfg.pipeline.retrieval.clone()
                };
                let bundle = retrieve_bundle(sample, chain, index, backends.embed.as_ref(), &rcfg)
                    .map_err(|e| StageError::new(Stage::Retrieval, e));
                bundles.push((mode, bundle));
            }
        }
        Self {
            sample: sample.clone(),
            chain,
            bundles,
        }
    }

    pub fn bundle(&self, mode: RetrievalMode) -> Option<&Result<RetrievalBundle, StageError>> {
        self.bundles.iter().find(|(m, _)| *m == mode).map(|(_, b)| b)
    }
}

fn prompt_bundle(sample: &VqaSample, bundle: &RetrievalBundle, head: &str) -> PromptBundle {
    PromptBundle {
        head: head.to_string(),
        refined_caption: bundle.refined_caption.clone(),
        patch_refs: bundle.patch_refs.clone(),
        knowledge: bundle.triples.clone(),
        question: sample.question.clone(),
        searched_images: bundle.searched_images.clone(),
    }
}

fn complete(sample: &VqaSample, prompt: &str, cfg: &Config, backends: &Backends) -> Result<String, StageError> {
    let req = ChatRequest::new(prompt)
        .map_err(|e| StageError::new(Stage::Answer, e))?
        .with_images([sample.image_ref.clone()])
        .with_params(cfg.pipeline.answer_params.clone());
    backends
        .chat
        .chat_complete(&req)
        .map(|r| r.text.trim().to_string())
        .map_err(|e| StageError::new(Stage::Answer, e))
}

// Identical prompts for one sample share a single completion.
type AnswerCache = HashMap<String, Result<String, StageError>>;

fn record_for(
    prepared: &PreparedSample,
    mode: RetrievalMode,
    opts: &PromptOptions,
    cfg: &Config,
    backends: &Backends,
    cache: &mut AnswerCache,
) -> EvalRecord {
    let sample = &prepared.sample;
    let mut rec = EvalRecord {
        sample_id: sample.sample_id.clone(),
        predicted: String::new(),
        gold_answers: sample.gold_answers.clone(),
        score: 0.0,
        error: None,
        trace: RecordTrace::default(),
    };
    let chain = match &prepared.chain {
        Ok(c) => c,
        Err(e) => {
            rec.error = Some(e.clone());
            return rec;
        }
    };
    rec.trace.chain = Some(ChainTrace::from(chain));
    let bundle = match prepared.bundle(mode) {
        Some(Ok(b)) => b,
        Some(Err(e)) => {
            rec.error = Some(e.clone());
            return rec;
        }
        None => {
            rec.error = Some(StageError::new(Stage::Retrieval, format!("mode {mode} was not prepared")));
            return rec;
        }
    };
    rec.trace.bundle = Some(BundleSummary::from(bundle));
    let prompt = assemble_prompt_with(&prompt_bundle(sample, bundle, &cfg.pipeline.answer_head), opts);
    let hash = prompt_hash(&prompt);
    rec.trace.prompt_hash = Some(hash.clone());
    let answer = cache
        .entry(hash)
        .or_insert_with(|| complete(sample, &prompt, cfg, backends))
        .clone();
    match answer {
        Ok(text) => rec.predicted = text,
        Err(e) => {
            rec.error = Some(e);
            return rec;
        }
    }
    match vqa_accuracy(&rec.predicted, &rec.gold_answers) {
        Ok(s) => rec.score = s,
        Err(e) => rec.error = Some(StageError::new(Stage::Score, e)),
    }
    rec
}

/// Runs the whole pipeline for one sample with the configured mode, budget
/// and order. Stage failures are recorded, not returned.
pub fn run_pipeline(sample: &VqaSample, cfg: &Config, backends: &Backends, index: &VectorIndex) -> EvalRecord {
    let mode = cfg.pipeline.retrieval.mode;
    let prepared = PreparedSample::prepare(sample, cfg, backends, index, &[mode]);
    record_for(&prepared, mode, &cfg.pipeline.prompt, cfg, backends, &mut AnswerCache::new())
}

/// Full intermediate state of a single answered question.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTrace {
    pub chain: CoVqdChain,
    pub bundle: RetrievalBundle,
    pub prompt: String,
    pub answer: String,
}

/// Like [`run_pipeline`] but returns the intermediate state and fails on
/// the first stage error. Gold answers are not needed.
pub fn answer_question(
    sample: &VqaSample,
    cfg: &Config,
    backends: &Backends,
    index: &VectorIndex,
) -> Result<AnswerTrace, StageError> {
    let chain = generate_chain(sample, backends.chat.as_ref(), &cfg.pipeline.chain)
        .map_err(|e| StageError::new(Stage::Chain, e))?;
    let bundle = retrieve_bundle(sample, &chain, index, backends.embed.as_ref(), &cfg.pipeline.retrieval)
        .map_err(|e| StageError::new(Stage::Retrieval, e))?;
    let prompt = assemble_prompt_with(
        &prompt_bundle(sample, &bundle, &cfg.pipeline.answer_head),
        &cfg.pipeline.prompt,
    );
    let answer = complete(sample, &prompt, cfg, backends)?;
    Ok(AnswerTrace {
        chain,
        bundle,
        prompt,
        answer,
    })
}

/// Axis values for an ablation. An empty axis uses the configured default.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AblationAxes {
    pub modes: Vec<RetrievalMode>,
    pub budgets: Vec<usize>,
    pub orders: Vec<PromptOrder>,
}

impl AblationAxes {
    /// Adds values from a `name=v1,v2` spec, e.g. `mode=T,V,V+T`,
    /// `budget=2,4,6` or `order=C_I_K,I_C_K`.
    pub fn add_spec(&mut self, spec: &str) -> Result<(), String> {
        let (name, values) = spec
            .split_once('=')
            .ok_or_else(|| format!("axis spec {spec:?} is not of the form name=v1,v2"))?;
        let values = values.split(',').map(str::trim).filter(|v| !v.is_empty());
        match name.trim() {
            "mode" | "modes" => {
                for v in values {
                    self.modes.push(v.parse()?);
                }
            }
            "budget" | "budgets" | "k" => {
                for v in values {
                    let b: usize = v.parse().map_err(|_| format!("invalid budget {v:?}"))?;
                    if b == 0 {
                        return Err("budget must be at least 1".into());
                    }
                    self.budgets.push(b);
                }
            }
            "order" | "orders" => {
                for v in values {
                    self.orders.push(v.parse()?);
                }
            }
            other => return Err(format!("unknown axis {other:?} (expected mode, budget or order)")),
        }
        Ok(())
    }

    /// Cartesian product in mode, budget, order nesting.
    pub fn combinations(&self, cfg: &Config) -> Vec<(RetrievalMode, usize, PromptOrder)> {
        fn or_default<T: Copy>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let modes = or_default(&self.modes, cfg.pipeline.retrieval.mode);
        let budgets = or_default(&self.budgets, cfg.pipeline.prompt.budget);
        let orders = or_default(&self.orders, cfg.pipeline.prompt.order);
        let mut out = Vec::new();
        for &m in &modes {
            for &b in &budgets {
                for &o in &orders {
                    out.push((m, b, o));
                }
            }
        }
        out
    }
}

/// One report per axis combination. Samples are processed by `workers`
/// threads; record order always follows the dataset.
pub fn run_ablation(
    dataset: &[VqaSample],
    axes: &AblationAxes,
    cfg: &Config,
    backends: &Backends,
    index: &VectorIndex,
    workers: usize,
) -> Result<Vec<EvalReport>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let combos = axes.combinations(cfg);
    let mut modes: Vec<RetrievalMode> = Vec::new();
    for (m, _, _) in &combos {
        if !modes.contains(m) {
            modes.push(*m);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::WorkerPool(e.to_string()))?;

    let per_sample: Vec<Vec<EvalRecord>> = pool.install(|| {
        dataset
            .par_iter()
            .map(|sample| {
                let prepared = PreparedSample::prepare(sample, cfg, backends, index, &modes);
                let mut cache = AnswerCache::new();
                combos
                    .iter()
                    .map(|&(mode, budget, order)| {
                        let opts = PromptOptions {
                            order,
                            budget,
                            ..cfg.pipeline.prompt
                        };
                        record_for(&prepared, mode, &opts, cfg, backends, &mut cache)
                    })
                    .collect()
            })
            .collect()
    });

    Ok(combos
        .iter()
        .enumerate()
        .map(|(c, &(mode, budget, order))| {
            let records: Vec<EvalRecord> = per_sample.iter().map(|recs| recs[c].clone()).collect();
            let mut pipeline = cfg.pipeline.clone();
            pipeline.retrieval.mode = mode;
            pipeline.prompt.budget = budget;
            pipeline.prompt.order = order;
            EvalReport {
                config: ConfigSnapshot {
                    seed: cfg.seed,
                    pipeline,
                },
                mode,
                budget,
                order,
                aggregate: mean_score(&records),
                records,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::{BackendError, ChatBackend, ChatResponse, MockChat, MockEmbed, MockRelation, MockRule};
    use crate::retrieval::KnowledgeEntry;

    const DIM: usize = 16;

    fn index(embed: &MockEmbed) -> VectorIndex {
        use crate::backends::EmbedBackend;
        let mut entries = Vec::new();
        for (id, text) in [
            ("e1", "The tower was built by Gustave Eiffel."),
            ("e2", "Gothic architecture uses pointed arches."),
            ("e3", "Paris is the capital of France."),
        ] {
            entries.push(KnowledgeEntry::explanation(id, text, embed.embed_text(text).unwrap()));
        }
        entries.push(KnowledgeEntry::image("i1", "img://tower", embed.embed_image("img://tower").unwrap()));
        VectorIndex::build(entries).unwrap()
    }

    fn setup(chat: MockChat) -> (Config, Backends, VectorIndex) {
        let mut cfg = Config::default();
        cfg.pipeline.retrieval.filter_tau = -1.0;
        let embed = MockEmbed::new(DIM, 1);
        let idx = index(&embed);
        let backends = Backends {
            chat: Arc::new(chat),
            embed: Arc::new(embed),
            relation: Arc::new(MockRelation::new()),
        };
        (cfg, backends, idx)
    }

    fn scripted() -> MockChat {
        MockChat::new(5)
            .with_rule(MockRule::contains(["decompose", "tower"], "Q: What is it? | A: a tower\nQ: Who built it? | A: Eiffel"))
            .with_rule(MockRule::contains(["Answer the question", "Who built"], "Eiffel"))
    }

    fn sample() -> VqaSample {
        VqaSample::new("s1", "Who built this tower?", "img://tower").unwrap().with_gold(["eiffel"; 3])
    }

    #[test]
    fn scripted_pipeline_scores_one() {
        let (cfg, b, idx) = setup(scripted());
        let rec = run_pipeline(&sample(), &cfg, &b, &idx);
        assert_eq!(rec.error, None);
        assert_eq!(rec.predicted, "Eiffel");
        assert_eq!(rec.score, 1.0);
        assert_eq!(rec.trace.chain.as_ref().unwrap().sub_qas.len(), 2);
        assert_eq!(rec.trace.prompt_hash.as_ref().unwrap().len(), 64);
        assert_eq!(rec, run_pipeline(&sample(), &cfg, &b, &idx));
    }

    struct FailingAnswer(MockChat);

    impl ChatBackend for FailingAnswer {
        fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
            if req.user.starts_with("Answer") {
                Err(BackendError::Status {
                    status: 503,
                    body: "down".into(),
                })
            } else {
                self.0.chat_complete(req)
            }
        }
    }

    #[test]
    fn answer_failure_is_recorded() {
        let (cfg, mut b, idx) = setup(scripted());
        b.chat = Arc::new(FailingAnswer(scripted()));
        let rec = run_pipeline(&sample(), &cfg, &b, &idx);
        assert_eq!(rec.score, 0.0);
        assert_eq!(rec.error.as_ref().unwrap().stage, Stage::Answer);
        assert!(rec.trace.prompt_hash.is_some());
    }

    #[test]
    fn empty_gold_is_a_score_error() {
        let (cfg, b, idx) = setup(scripted());
        let s = VqaSample::new("s", "Who built this tower?", "img://tower").unwrap();
        let rec = run_pipeline(&s, &cfg, &b, &idx);
        assert_eq!(rec.error.unwrap().stage, Stage::Score);
        assert_eq!(rec.predicted, "Eiffel");
    }

    #[test]
    fn axes_parse_and_default() {
        let cfg = Config::default();
        let mut axes = AblationAxes::default();
        assert_eq!(axes.combinations(&cfg), vec![(RetrievalMode::VisualText, 4, PromptOrder::CaptionFirst)]);
        axes.add_spec("mode=T,V,V+T").unwrap();
        axes.add_spec("budget=2,6").unwrap();
        assert_eq!(axes.combinations(&cfg).len(), 6);
        assert!(axes.add_spec("colour=red").is_err());
        assert!(axes.add_spec("budget=0").is_err());
        assert!(axes.add_spec("mode").is_err());
    }

    #[test]
    fn ablation_preserves_dataset_order_across_workers() {
        let (cfg, b, idx) = setup(scripted());
        let ds: Vec<VqaSample> = (0..6)
            .map(|i| {
                VqaSample::new(format!("s{i}"), format!("Who built this tower number {i}?"), "img://tower")
                    .unwrap()
                    .with_gold(["eiffel"])
            })
            .collect();
        let mut axes = AblationAxes::default();
        axes.add_spec("mode=T,V").unwrap();
        let one = run_ablation(&ds, &axes, &cfg, &b, &idx, 1).unwrap();
        let four = run_ablation(&ds, &axes, &cfg, &b, &idx, 4).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.len(), 2);
        let ids: Vec<_> = one[0].records.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, ["s0", "s1", "s2", "s3", "s4", "s5"]);
        assert!(run_ablation(&[], &axes, &cfg, &b, &idx, 1).is_err());
    }
}
