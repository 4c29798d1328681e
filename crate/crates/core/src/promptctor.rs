//! Final prompt assembly: head, refined caption, patch locators, knowledge
//! triples and the original question, one block per component joined by
//! single newlines. Empty components are skipped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::retrieval::QaeTriple;

pub const DEFAULT_ANSWER_HEAD: &str =
    "Answer the question using the image, the caption, and the knowledge below. Answer with a short phrase.";

pub const DEFAULT_KNOWLEDGE_BUDGET: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub head: String,
    pub refined_caption: String,
    pub patch_refs: Vec<String>,
    pub knowledge: Vec<QaeTriple>,
    pub question: String,
    /// Searched image locators; rendered only when enabled in [`PromptOptions`].
    #[serde(default)]
    pub searched_images: Vec<String>,
}

/// Relative order of the caption and patch blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum PromptOrder {
    /// caption, patches, knowledge
    #[default]
    #[serde(rename = "C_I_K")]
    CaptionFirst,
    /// patches, caption, knowledge
    #[serde(rename = "I_C_K")]
    PatchesFirst,
}

impl PromptOrder {
    pub const ALL: [PromptOrder; 2] = [PromptOrder::CaptionFirst, PromptOrder::PatchesFirst];
}

impl fmt::Display for PromptOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptOrder::CaptionFirst => "C_I_K",
            PromptOrder::PatchesFirst => "I_C_K",
        })
    }
}

impl FromStr for PromptOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "C_I_K" | "CIK" => Ok(PromptOrder::CaptionFirst),
            "I_C_K" | "ICK" => Ok(PromptOrder::PatchesFirst),
            other => Err(format!("unknown prompt order {other:?} (expected C_I_K or I_C_K)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    pub order: PromptOrder,
    pub budget: usize,
    pub include_searched_images: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            order: PromptOrder::default(),
            budget: DEFAULT_KNOWLEDGE_BUDGET,
            include_searched_images: false,
        }
    }
}

/// Keeps the `budget` best-scoring triples, returned in their original
/// order. Equal scores favour the earlier triple.
pub fn select_knowledge(triples: &[QaeTriple], budget: usize) -> Vec<QaeTriple> {
    let budget = budget.max(1);
    if triples.len() <= budget {
        return triples.to_vec();
    }
    let mut ranked: Vec<usize> = (0..triples.len()).collect();
    ranked.sort_by(|&a, &b| triples[b].score.total_cmp(&triples[a].score).then(a.cmp(&b)));
    ranked.truncate(budget);
    ranked.sort_unstable();
    ranked.into_iter().map(|i| triples[i].clone()).collect()
}

// Newlines inside a component would break the one-line-per-item layout.
fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn knowledge_line(t: &QaeTriple) -> String {
    format!(
        "Q: {} A: {} E: {}",
        one_line(&t.sub_question),
        one_line(&t.sub_answer),
        one_line(&t.explanation)
    )
}

pub fn assemble_prompt(bundle: &PromptBundle, order: PromptOrder, budget: usize) -> String {
    assemble_prompt_with(
        bundle,
        &PromptOptions {
            order,
            budget,
            include_searched_images: false,
        },
    )
}

pub fn assemble_prompt_with(bundle: &PromptBundle, opts: &PromptOptions) -> String {
    let caption = one_line(&bundle.refined_caption);
    let mut locators: Vec<&str> = bundle.patch_refs.iter().map(String::as_str).collect();
    if opts.include_searched_images {
        locators.extend(bundle.searched_images.iter().map(String::as_str));
    }
    let patches = one_line(&locators.join(" "));
    let knowledge: Vec<String> = select_knowledge(&bundle.knowledge, opts.budget)
        .iter()
        .map(knowledge_line)
        .collect();

    let mut blocks: Vec<String> = vec![one_line(&bundle.head)];
    match opts.order {
        PromptOrder::CaptionFirst => blocks.extend([caption, patches]),
        PromptOrder::PatchesFirst => blocks.extend([patches, caption]),
    }
    blocks.extend(knowledge);
    blocks.push(one_line(&bundle.question));
    blocks.retain(|b| !b.is_empty());
    blocks.join("\n")
}
