use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{
    Embedding, EntryKind, QaeTriple, RetrievalBundle, RetrievalConfig, RetrievalError, ScoredId, VectorIndex,
};
use crate::backends::EmbedBackend;
use crate::chaingen::{CoVqdChain, VqaSample};

/// Keeps the candidates whose similarity to `supervisor` is at least `tau`,
/// in input order. Scores are left as they were (similarity to the query).
pub fn relevance_filter(
    candidates: &[ScoredId],
    supervisor: &Embedding,
    index: &VectorIndex,
    tau: f64,
) -> Result<Vec<ScoredId>, RetrievalError> {
    let mut kept = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let entry = index
            .get(&cand.entry_id)
            .ok_or_else(|| RetrievalError::UnknownId(cand.entry_id.clone()))?;
        if supervisor.cosine(&entry.embedding)? >= tau {
            kept.push(cand.clone());
        }
    }
    Ok(kept)
}

/// Coarse whole-image retrieval over image documents. Returns nothing when
/// the visual channel is disabled.
pub fn original_image_retrieve(
    image_emb: &Embedding,
    index: &VectorIndex,
    cfg: &RetrievalConfig,
) -> Result<Vec<String>, RetrievalError> {
    if !cfg.mode.uses_visual() {
        return Ok(Vec::new());
    }
    Ok(index
        .topk(image_emb, cfg.k_image, Some(EntryKind::ImageDoc))?
        .into_iter()
        .map(|h| h.entry_id)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchHit {
    /// 0-based position of the query patch.
    pub patch: usize,
    pub entry_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MultimodalHits {
    /// Best explanation entry for the caption that survived filtering.
    pub caption_hit: Option<ScoredId>,
    pub patch_hits: Vec<PatchHit>,
}

impl MultimodalHits {
    /// True when filtering removed everything; callers fall back to the
    /// original caption.
    pub fn is_empty(&self) -> bool {
        self.caption_hit.is_none() && self.patch_hits.is_empty()
    }
}

/// Caption and patch retrieval supervised by the question embedding.
///
/// The caption channel searches explanation entries and runs when the mode
/// includes text; the patch channel searches image documents and runs when
/// the mode includes vision.
pub fn multimodal_retrieve(
    patch_embs: &[Embedding],
    caption_emb: Option<&Embedding>,
    question_emb: &Embedding,
    index: &VectorIndex,
    cfg: &RetrievalConfig,
) -> Result<MultimodalHits, RetrievalError> {
    let mut out = MultimodalHits::default();
    if cfg.mode.uses_visual() {
        for (patch, emb) in patch_embs.iter().enumerate() {
            let cands = index.topk(emb, cfg.k_multimodal, Some(EntryKind::ImageDoc))?;
            out.patch_hits.extend(
                relevance_filter(&cands, question_emb, index, cfg.filter_tau)?
                    .into_iter()
                    .map(|h| PatchHit {
                        patch,
                        entry_id: h.entry_id,
                        score: h.score,
                    }),
            );
        }
    }
    if let (true, Some(caption)) = (cfg.mode.uses_text(), caption_emb) {
        let cands = index.topk(caption, cfg.k_multimodal, Some(EntryKind::ExplanationText))?;
        // topk order is preserved by the filter, so the first survivor is the best
        out.caption_hit = relevance_filter(&cands, question_emb, index, cfg.filter_tau)?
            .into_iter()
            .next();
    }
    Ok(out)
}

/// One triple per sub-question, in chain order: the best explanation for
/// `"<q_i> <a_i>"`, never reusing an entry picked for an earlier step. Stops
/// early once the explanations run out.
pub fn covqd_guided_retrieve(
    chain: &CoVqdChain,
    index: &VectorIndex,
    embed: &dyn EmbedBackend,
    cfg: &RetrievalConfig,
) -> Result<Vec<QaeTriple>, RetrievalError> {
    if !cfg.mode.uses_text() {
        return Ok(Vec::new());
    }
    if index.count_kind(EntryKind::ExplanationText) == 0 {
        return Err(RetrievalError::NoExplanations);
    }
    let mut used: HashSet<&str> = HashSet::new();
    let mut triples = Vec::with_capacity(chain.len());
    for qa in chain.sub_qas() {
        let query = embed
            .embed_text(&qa.query_text())
            .map_err(|e| RetrievalError::Backend(e.to_string()))?;
        let Some(best) = index
            .topk_excluding(&query, 1, Some(EntryKind::ExplanationText), &used)?
            .into_iter()
            .next()
        else {
            break;
        };
        let entry = index.get(&best.entry_id).expect("hit comes from the index");
        used.insert(entry.entry_id.as_str());
        triples.push(QaeTriple {
            sub_question: qa.sub_question.clone(),
            sub_answer: qa.sub_answer.clone(),
            explanation: entry.text.clone().unwrap_or_default(),
            score: best.score,
            entry_id: best.entry_id,
        });
    }
    Ok(triples)
}

fn embed_err(e: crate::backends::BackendError) -> RetrievalError {
    RetrievalError::Backend(e.to_string())
}

/// Runs all three retrieval processes for one sample and assembles the
/// bundle handed to prompt construction.
pub fn retrieve_bundle(
    sample: &VqaSample,
    chain: &CoVqdChain,
    index: &VectorIndex,
    embed: &dyn EmbedBackend,
    cfg: &RetrievalConfig,
) -> Result<RetrievalBundle, RetrievalError> {
    cfg.validate()?;
    let image_emb = embed.embed_image(&sample.image_ref).map_err(embed_err)?;
    let searched_images = original_image_retrieve(&image_emb, index, cfg)?;

    let question_emb = embed.embed_text(&sample.question).map_err(embed_err)?;
    let patch_embs = if cfg.mode.uses_visual() {
        sample
            .patch_refs()
            .iter()
            .map(|p| embed.embed_image(p).map_err(embed_err))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let caption_emb = match sample.caption.as_deref() {
        Some(c) if cfg.mode.uses_text() => Some(embed.embed_text(c).map_err(embed_err)?),
        _ => None,
    };
    let hits = multimodal_retrieve(&patch_embs, caption_emb.as_ref(), &question_emb, index, cfg)?;

    let refined_caption = hits
        .caption_hit
        .as_ref()
        .and_then(|h| index.get(&h.entry_id))
        .and_then(|e| e.text.clone())
        .or_else(|| sample.caption.clone())
        .unwrap_or_default();
    let mut patch_refs: Vec<String> = Vec::new();
    for hit in &hits.patch_hits {
        if let Some(loc) = index.get(&hit.entry_id).and_then(|e| e.image_ref.as_ref()) {
            if !patch_refs.contains(loc) {
                patch_refs.push(loc.clone());
            }
        }
    }
    let triples = covqd_guided_retrieve(chain, index, embed, cfg)?;
    Ok(RetrievalBundle {
        refined_caption,
        patch_refs,
        searched_images,
        triples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockEmbed;
    use crate::chaingen::SubQa;
    use crate::retrieval::{KnowledgeEntry, RetrievalMode};

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn cfg(mode: RetrievalMode) -> RetrievalConfig {
        RetrievalConfig {
            mode,
            ..RetrievalConfig::default()
        }
    }

    fn mixed() -> VectorIndex {
        VectorIndex::build(vec![
            KnowledgeEntry::explanation("e1", "gothic style", emb(&[1.0, 0.0, 0.0])),
            KnowledgeEntry::explanation("e2", "france", emb(&[0.0, 1.0, 0.0])),
            KnowledgeEntry::image("i1", "img://tower", emb(&[0.0, 0.0, 1.0])),
            KnowledgeEntry::image("i2", "img://bridge", emb(&[0.0, 0.6, 0.8])),
        ])
        .unwrap()
    }

    #[test]
    fn vacuous_threshold_keeps_everything() {
        let idx = mixed();
        let cands = idx.topk(&emb(&[0.3, 0.3, 0.3]), 4, None).unwrap();
        let kept = relevance_filter(&cands, &emb(&[1.0, 0.0, 0.0]), &idx, -1.0).unwrap();
        assert_eq!(kept, cands);
    }

    #[test]
    fn unit_threshold_keeps_exact_matches_only() {
        let idx = mixed();
        let cands = idx.topk(&emb(&[0.3, 0.3, 0.3]), 4, None).unwrap();
        let kept = relevance_filter(&cands, &emb(&[0.0, 1.0, 0.0]), &idx, 1.0).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].entry_id, "e2");
    }

    #[test]
    fn filter_rejects_unknown_ids() {
        let cands = vec![ScoredId {
            entry_id: "ghost".into(),
            score: 0.5,
        }];
        assert!(matches!(
            relevance_filter(&cands, &emb(&[1.0, 0.0, 0.0]), &mixed(), 0.0),
            Err(RetrievalError::UnknownId(_))
        ));
    }

    #[test]
    fn image_retrieval_identity_and_text_mode() {
        let idx = mixed();
        let q = emb(&[0.0, 0.0, 1.0]);
        assert_eq!(
            original_image_retrieve(&q, &idx, &cfg(RetrievalMode::VisualText)).unwrap()[0],
            "i1"
        );
        assert!(original_image_retrieve(&q, &idx, &cfg(RetrievalMode::Text))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn multimodal_keeps_supervised_patch_hit() {
        let idx = mixed();
        let patch = emb(&[0.0, 0.0, 1.0]);
        let question = emb(&[0.0, 0.5, 1.0]);
        let hits = multimodal_retrieve(&[patch], None, &question, &idx, &cfg(RetrievalMode::Visual)).unwrap();
        assert!(hits.patch_hits.iter().any(|h| h.entry_id == "i1"));
        assert!(hits.caption_hit.is_none());
    }

    #[test]
    fn multimodal_signals_fallback_when_filtered_out() {
        let idx = mixed();
        let mut c = cfg(RetrievalMode::VisualText);
        c.filter_tau = 1.0;
        let hits = multimodal_retrieve(
            &[emb(&[0.0, 0.0, 1.0])],
            Some(&emb(&[1.0, 0.0, 0.0])),
            &emb(&[0.5, 0.5, 0.5]),
            &idx,
            &c,
        )
        .unwrap();
        assert!(hits.is_empty());
    }

    fn chain_of(questions: &[(&str, &str)]) -> CoVqdChain {
        let sample = VqaSample::new("s", "Who built this tower?", "img://tower").unwrap();
        let qas = questions
            .iter()
            .enumerate()
            .map(|(i, (q, a))| SubQa {
                index: i + 1,
                sub_question: q.to_string(),
                sub_answer: a.to_string(),
            })
            .collect();
        CoVqdChain::new(sample, qas, true).unwrap()
    }

    #[test]
    fn guided_identity_hit() {
        let embed = MockEmbed::new(8, 0);
        let target = embed.embed_text("what style? gothic").unwrap();
        let other = embed.embed_text("unrelated").unwrap();
        let idx = VectorIndex::build(vec![
            KnowledgeEntry::explanation("e-target", "gothic explained", target),
            KnowledgeEntry::explanation("e-other", "noise", other),
        ])
        .unwrap();
        let triples = covqd_guided_retrieve(
            &chain_of(&[("what style?", "gothic")]),
            &idx,
            &embed,
            &cfg(RetrievalMode::Text),
        )
        .unwrap();
        assert_eq!(triples.len(), 1);
        assert_eq!(triples[0].entry_id, "e-target");
        assert!((triples[0].score - 1.0).abs() < 1e-12);
        assert_eq!(triples[0].explanation, "gothic explained");
    }

    #[test]
    fn guided_on_undecomposed_chain() {
        let embed = MockEmbed::new(8, 0);
        let sample = VqaSample::new("s", "Who built this tower?", "img").unwrap();
        let chain = CoVqdChain::undecomposed(sample);
        let idx = VectorIndex::build(vec![KnowledgeEntry::explanation(
            "e",
            "x",
            embed.embed_text("Who built this tower?").unwrap(),
        )])
        .unwrap();
        let triples = covqd_guided_retrieve(&chain, &idx, &embed, &cfg(RetrievalMode::Text)).unwrap();
        assert_eq!(triples.len(), 1);
        assert_eq!(triples[0].sub_question, "Who built this tower?");
    }

    #[test]
    fn guided_exclusion_and_exhaustion() {
        let embed = MockEmbed::new(4, 1);
        let idx = VectorIndex::build(vec![
            KnowledgeEntry::explanation("only", "x", emb(&[1.0, 0.0, 0.0, 0.0])),
            KnowledgeEntry::image("img", "img://a", emb(&[0.0, 1.0, 0.0, 0.0])),
        ])
        .unwrap();
        let triples =
            covqd_guided_retrieve(&chain_of(&[("a", ""), ("b", ""), ("c", "")]), &idx, &embed, &cfg(RetrievalMode::Text))
                .unwrap();
        assert_eq!(triples.len(), 1);
    }

    #[test]
    fn guided_requires_explanations_and_respects_mode() {
        let embed = MockEmbed::new(3, 0);
        let idx = VectorIndex::build(vec![KnowledgeEntry::image("i", "img://a", emb(&[1.0, 0.0, 0.0]))]).unwrap();
        assert!(matches!(
            covqd_guided_retrieve(&chain_of(&[("a", "")]), &idx, &embed, &cfg(RetrievalMode::Text)),
            Err(RetrievalError::NoExplanations)
        ));
        assert!(covqd_guided_retrieve(&chain_of(&[("a", "")]), &idx, &embed, &cfg(RetrievalMode::Visual))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn bundle_mode_gating() {
        let embed = MockEmbed::new(3, 0);
        let idx = mixed();
        let sample = VqaSample::new("s", "Who built this tower?", "img://tower")
            .unwrap()
            .with_caption("a tall tower");
        let chain = chain_of(&[("what style?", "gothic"), ("where?", "")]);
        let mut c = cfg(RetrievalMode::Text);
        c.filter_tau = -1.0;
        let t = retrieve_bundle(&sample, &chain, &idx, &embed, &c).unwrap();
        assert!(t.searched_images.is_empty() && t.patch_refs.is_empty());
        assert_eq!(t.triples.len(), 2);
        c.mode = RetrievalMode::Visual;
        let v = retrieve_bundle(&sample, &chain, &idx, &embed, &c).unwrap();
        assert!(v.triples.is_empty());
        assert_eq!(v.refined_caption, "a tall tower");
        assert!(!v.searched_images.is_empty());
    }
}
