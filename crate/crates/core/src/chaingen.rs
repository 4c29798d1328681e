//! Question decomposition: the decomposition prompt, the decompose/keep
//! decision, and parsing of the sub-question chain returned by the model.
//!
//! A chain is rendered one sub-question/answer pair per line as
//! `Q: <sub-question> | A: <sub-answer>`; the answer part is optional.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, ChatBackend, ChatParams, ChatRequest};

pub const DECOMPOSITION_HEAD: &str =
    "Please decompose the given question into sub-questions for easier answering according to the given image.";

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MAX_SUBQUESTIONS: usize = 4;

const ANSWER_MARKER: &str = "| A:";

#[derive(Debug, thiserror::Error)]
pub enum ChainError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("decomposition probability {0} is outside (0, 1)")]
    ProbabilityDomain(f64),
    #[error("threshold {0} is outside [0, 1]")]
    ThresholdDomain(f64),
    #[error("no sub-question lines in completion: {raw:?}")]
    NoLines { raw: String },
    #[error("line {line}: {detail}")]
    BadLine { line: usize, detail: String },
    #[error("invalid chain: {0}")]
    Invalid(String),
    #[error("max sub-questions must be at least 1")]
    ZeroBudget,
    #[error("backend failure for sample {sample_id}: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
}

/// An image-question pair, optionally with gold answers and the visual
/// inputs consumed by multimodal retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSample")]
pub struct VqaSample {
    pub sample_id: String,
    pub question: String,
    pub image_ref: String,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    /// Global caption of the image, when one is available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    /// Locators of image patches. Empty means the whole image is the only patch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patches: Vec<String>,
}

#[derive(Deserialize)]
struct RawSample {
    sample_id: String,
    question: String,
    image_ref: String,
    #[serde(default)]
    gold_answers: Vec<String>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    patches: Vec<String>,
}

impl TryFrom<RawSample> for VqaSample {
    type Error = ChainError;

    fn try_from(r: RawSample) -> Result<Self, Self::Error> {
        let mut s = VqaSample::new(r.sample_id, r.question, r.image_ref)?;
        s.gold_answers = r.gold_answers;
        s.caption = r.caption.filter(|c| !c.trim().is_empty());
        s.patches = r.patches;
        Ok(s)
    }
}

impl VqaSample {
    /// The question is stored trimmed and must not be blank.
    pub fn new(
        sample_id: impl Into<String>,
        question: impl AsRef<str>,
        image_ref: impl Into<String>,
    ) -> Result<Self, ChainError> {
        let question = question.as_ref().trim();
        if question.is_empty() {
            return Err(ChainError::EmptyQuestion);
        }
        Ok(Self {
            sample_id: sample_id.into(),
            question: question.to_string(),
            image_ref: image_ref.into(),
            gold_answers: Vec::new(),
            caption: None,
            patches: Vec::new(),
        })
    }

    pub fn with_gold(mut self, gold: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.gold_answers = gold.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Self {
        self.caption = Some(caption.into());
        self
    }

    pub fn with_patches(mut self, patches: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.patches = patches.into_iter().map(Into::into).collect();
        self
    }

    /// Patch locators, falling back to the full image.
    pub fn patch_refs(&self) -> Vec<String> {
        if self.patches.is_empty() {
            vec![self.image_ref.clone()]
        } else {
            self.patches.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQa {
    pub index: usize,
    pub sub_question: String,
    #[serde(default)]
    pub sub_answer: String,
}

impl SubQa {
    /// Line form, `Q: <q> | A: <a>`; the answer part is dropped when empty.
    pub fn to_line(&self) -> String {
        if self.sub_answer.is_empty() {
            format!("Q: {}", self.sub_question)
        } else {
            format!("Q: {} {ANSWER_MARKER} {}", self.sub_question, self.sub_answer)
        }
    }

    /// Text embedded for retrieval: question and answer joined by a space.
    pub fn query_text(&self) -> String {
        if self.sub_answer.is_empty() {
            self.sub_question.clone()
        } else {
            format!("{} {}", self.sub_question, self.sub_answer)
        }
    }
}

/// Ordered chain of sub-question/answer pairs for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawChain")]
pub struct CoVqdChain {
    source: VqaSample,
    sub_qas: Vec<SubQa>,
    decomposed: bool,
}

#[derive(Deserialize)]
struct RawChain {
    source: VqaSample,
    sub_qas: Vec<SubQa>,
    decomposed: bool,
}

impl TryFrom<RawChain> for CoVqdChain {
    type Error = ChainError;

    fn try_from(r: RawChain) -> Result<Self, Self::Error> {
        CoVqdChain::new(r.source, r.sub_qas, r.decomposed)
    }
}

impl CoVqdChain {
    pub fn new(source: VqaSample, sub_qas: Vec<SubQa>, decomposed: bool) -> Result<Self, ChainError> {
        if sub_qas.is_empty() {
            return Err(ChainError::Invalid("chain has no sub-questions".into()));
        }
        for (pos, qa) in sub_qas.iter().enumerate() {
            if qa.index != pos + 1 {
                return Err(ChainError::Invalid(format!(
                    "sub-question at position {} has index {}",
                    pos + 1,
                    qa.index
                )));
            }
            if qa.sub_question.trim().is_empty() {
                return Err(ChainError::Invalid(format!("sub-question {} is empty", qa.index)));
            }
        }
        if !decomposed && (sub_qas.len() != 1 || sub_qas[0].sub_question != source.question) {
            return Err(ChainError::Invalid(
                "a non-decomposed chain must wrap exactly the original question".into(),
            ));
        }
        Ok(Self {
            source,
            sub_qas,
            decomposed,
        })
    }

    /// Single-element chain wrapping the original question.
    pub fn undecomposed(source: VqaSample) -> Self {
        let qa = SubQa {
            index: 1,
            sub_question: source.question.clone(),
            sub_answer: String::new(),
        };
        Self {
            source,
            sub_qas: vec![qa],
            decomposed: false,
        }
    }

    pub fn source(&self) -> &VqaSample {
        &self.source
    }

    pub fn sub_qas(&self) -> &[SubQa] {
        &self.sub_qas
    }

    pub fn decomposed(&self) -> bool {
        self.decomposed
    }

    pub fn len(&self) -> usize {
        self.sub_qas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_qas.is_empty()
    }

    /// Keeps the first `max_n` sub-questions.
    pub fn truncated(mut self, max_n: usize) -> Self {
        self.sub_qas.truncate(max_n.max(1));
        self
    }

    /// Newline-delimited line format accepted by [`parse_chain`].
    pub fn to_lines(&self) -> String {
        self.sub_qas
            .iter()
            .map(SubQa::to_line)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionDecision {
    pub probability: f64,
    pub threshold: f64,
    pub decompose: bool,
}

pub fn render_decomposition_prompt(sample: &VqaSample) -> String {
    format!(
        "{DECOMPOSITION_HEAD}\nContext: {}\nQuestion: {}",
        sample.image_ref.trim(),
        sample.question.trim()
    )
}

/// Decomposes when `probability >= threshold`.
pub fn decide_decompose(probability: f64, threshold: f64) -> Result<DecompositionDecision, ChainError> {
    if !(probability > 0.0 && probability < 1.0) {
        return Err(ChainError::ProbabilityDomain(probability));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ChainError::ThresholdDomain(threshold));
    }
    Ok(DecompositionDecision {
        probability,
        threshold,
        decompose: probability >= threshold,
    })
}

pub fn parse_chain(raw: &str, source: &VqaSample) -> Result<CoVqdChain, ChainError> {
    let mut sub_qas = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rest = line.strip_prefix("Q:").ok_or_else(|| ChainError::BadLine {
            line: lineno,
            detail: format!("expected `Q: <question>`, found {line:?}"),
        })?;
        let (question, answer) = match rest.split_once(ANSWER_MARKER) {
            Some((q, a)) => (q.trim(), a.trim()),
            None => (rest.trim(), ""),
        };
        if question.is_empty() {
            return Err(ChainError::BadLine {
                line: lineno,
                detail: "empty sub-question".into(),
            });
        }
        sub_qas.push(SubQa {
            index: sub_qas.len() + 1,
            sub_question: question.to_string(),
            sub_answer: answer.to_string(),
        });
    }
    if sub_qas.is_empty() {
        return Err(ChainError::NoLines { raw: raw.to_string() });
    }
    CoVqdChain::new(source.clone(), sub_qas, true)
}

/// Settings for [`generate_chain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSettings {
    pub threshold: f64,
    pub max_n: usize,
    /// Decision input used when the backend supplies no probability.
    /// Compared against the threshold directly; may be 0 or 1.
    pub fallback_probability: f64,
    pub params: ChatParams,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_n: DEFAULT_MAX_SUBQUESTIONS,
            fallback_probability: 1.0,
            params: ChatParams::default(),
        }
    }
}

pub fn generate_chain(
    sample: &VqaSample,
    chat: &dyn ChatBackend,
    settings: &ChainSettings,
) -> Result<CoVqdChain, ChainError> {
    if settings.max_n == 0 {
        return Err(ChainError::ZeroBudget);
    }
    let backend_err = |source| ChainError::Backend {
        sample_id: sample.sample_id.clone(),
        source,
    };
    let decompose = match chat.decomposition_probability(sample).map_err(backend_err)? {
        Some(p) => decide_decompose(p, settings.threshold)?.decompose,
        None => settings.fallback_probability >= settings.threshold,
    };
    if !decompose {
        return Ok(CoVqdChain::undecomposed(sample.clone()));
    }
    let req = ChatRequest::new(render_decomposition_prompt(sample))
        .map_err(backend_err)?
        .with_images([sample.image_ref.clone()])
        .with_params(settings.params.clone());
    let resp = chat.chat_complete(&req).map_err(backend_err)?;
    Ok(parse_chain(&resp.text, sample)?.truncated(settings.max_n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockChat, MockRule};

    fn tower() -> VqaSample {
        VqaSample::new("s1", "Who built this tower?", "img://1").unwrap()
    }

    #[test]
    fn prompt_template() {
        assert_eq!(
            render_decomposition_prompt(&tower()),
            "Please decompose the given question into sub-questions for easier answering according to the given image.\nContext: img://1\nQuestion: Who built this tower?"
        );
    }

    #[test]
    fn trailing_whitespace_trimmed() {
        let s = VqaSample::new("s", "Who built this tower?   \n", "img://1").unwrap();
        assert!(render_decomposition_prompt(&s).ends_with("Question: Who built this tower?"));
    }

    #[test]
    fn empty_question_rejected() {
        assert!(matches!(VqaSample::new("s", "   ", "img"), Err(ChainError::EmptyQuestion)));
        let json = r#"{"sample_id":"x","question":"","image_ref":"i"}"#;
        assert!(serde_json::from_str::<VqaSample>(json).is_err());
    }

    #[test]
    fn decision_rule() {
        assert!(decide_decompose(0.9, 0.5).unwrap().decompose);
        assert!(decide_decompose(0.5, 0.5).unwrap().decompose);
        assert!(!decide_decompose(0.2, 0.5).unwrap().decompose);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(decide_decompose(bad, 0.5), Err(ChainError::ProbabilityDomain(_))));
        }
        let d = decide_decompose(0.3, 0.25).unwrap();
        assert_eq!((d.probability, d.threshold), (0.3, 0.25));
    }

    #[test]
    fn parses_two_lines_second_without_answer() {
        let chain = parse_chain(
            "Q: what style is the tower? | A: gothic\nQ: which country uses this style?",
            &tower(),
        )
        .unwrap();
        assert_eq!(chain.len(), 2);
        assert!(chain.decomposed());
        assert_eq!(chain.sub_qas()[0].sub_answer, "gothic");
        assert_eq!(chain.sub_qas()[1].sub_question, "which country uses this style?");
        assert_eq!(chain.sub_qas()[1].sub_answer, "");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_chain("", &tower()), Err(ChainError::NoLines { .. })));
        assert!(matches!(
            parse_chain("A: gothic", &tower()),
            Err(ChainError::BadLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_chain("Q: fine\n\nQ:  | A: x", &tower()),
            Err(ChainError::BadLine { line: 3, .. })
        ));
    }

    #[test]
    fn chain_invariants_enforced() {
        let qa = |i: usize, q: &str| SubQa {
            index: i,
            sub_question: q.into(),
            sub_answer: String::new(),
        };
        assert!(CoVqdChain::new(tower(), vec![], true).is_err());
        assert!(CoVqdChain::new(tower(), vec![qa(2, "x")], true).is_err());
        assert!(CoVqdChain::new(tower(), vec![qa(1, "other")], false).is_err());
        assert!(CoVqdChain::new(tower(), vec![qa(1, "Who built this tower?")], false).is_ok());
    }

    fn scripted(completion: &str, prob: f64) -> MockChat {
        MockChat::new(0)
            .with_aux_probability(Some(prob))
            .with_rule(MockRule::contains([DECOMPOSITION_HEAD], completion))
    }

    #[test]
    fn generate_decomposes_when_probable() {
        let chat = scripted("Q: a | A: 1\nQ: b | A: 2\nQ: c", 0.9);
        let chain = generate_chain(&tower(), &chat, &ChainSettings::default()).unwrap();
        assert_eq!(chain.len(), 3);
        assert!(chain.decomposed());
    }

    #[test]
    fn generate_keeps_question_when_improbable() {
        let chat = scripted("Q: a", 0.1);
        let chain = generate_chain(&tower(), &chat, &ChainSettings::default()).unwrap();
        assert!(!chain.decomposed());
        assert_eq!(chain.len(), 1);
        assert_eq!(chain.sub_qas()[0].sub_question, "Who built this tower?");
    }

    #[test]
    fn generate_truncates_to_budget() {
        let chat = scripted("Q: 1\nQ: 2\nQ: 3\nQ: 4\nQ: 5\nQ: 6", 0.9);
        let chain = generate_chain(&tower(), &chat, &ChainSettings::default()).unwrap();
        let qs: Vec<_> = chain.sub_qas().iter().map(|q| q.sub_question.as_str()).collect();
        assert_eq!(qs, ["1", "2", "3", "4"]);
    }

    #[test]
    fn generate_propagates_parse_errors_and_sample_id() {
        let chat = scripted("nonsense", 0.9);
        assert!(matches!(
            generate_chain(&tower(), &chat, &ChainSettings::default()),
            Err(ChainError::BadLine { .. })
        ));
        let chat = MockChat::new(0).with_aux_probability(Some(2.0));
        assert!(generate_chain(&tower(), &chat, &ChainSettings::default()).is_err());
    }

    #[test]
    fn fallback_probability_used_when_backend_silent() {
        let chat = MockChat::new(0).with_rule(MockRule::contains([DECOMPOSITION_HEAD], "Q: x"));
        let mut settings = ChainSettings::default();
        assert!(generate_chain(&tower(), &chat, &settings).unwrap().decomposed());
        settings.fallback_probability = 0.0;
        assert!(!generate_chain(&tower(), &chat, &settings).unwrap().decomposed());
    }
}
