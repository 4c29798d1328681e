#![allow(dead_code)]

use std::path::PathBuf;

use chainrag_core::backends::Backends;
use chainrag_core::chaingen::VqaSample;
use chainrag_core::config::Config;
use chainrag_core::evalharness::load_dataset;
use chainrag_core::retrieval::{load_corpus, VectorIndex};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub struct World {
    pub cfg: Config,
    pub backends: Backends,
    pub index: VectorIndex,
    pub dataset: Vec<VqaSample>,
}

/// Mocked pipeline world: the given config, the fixture corpus embedded by
/// the mock backend, and the 5-sample fixture dataset.
pub fn world(config: &str) -> World {
    let cfg = Config::load(&fixture(config)).expect("fixture config parses");
    let backends = cfg.build_backends().expect("mock backends build");
    let entries = load_corpus(&fixture("corpus.jsonl"))
        .expect("fixture corpus parses")
        .into_iter()
        .map(|r| r.into_entry(Some(backends.embed.as_ref())))
        .collect::<Result<Vec<_>, _>>()
        .expect("corpus embeds");
    let index = VectorIndex::build(entries).expect("index builds");
    let dataset = load_dataset(&fixture("dataset.jsonl")).expect("fixture dataset parses");
    World {
        cfg,
        backends,
        index,
        dataset,
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Full sort by score descending, then entry id ascending.
pub fn rank_desc(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}
