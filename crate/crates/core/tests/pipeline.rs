mod common;

use std::collections::HashMap;

use chainrag_core::evalharness::{
    answer_question, emit_report, read_report, run_ablation, run_pipeline, AblationAxes, Stage,
};
use chainrag_core::retrieval::RetrievalMode;

use common::world;

fn axes(specs: &[&str]) -> AblationAxes {
    let mut a = AblationAxes::default();
    for s in specs {
        a.add_spec(s).unwrap();
    }
    a
}

#[test]
fn budget_axis_changes_prompt_only_when_triples_exceed_budget() {
    let w = world("mock_config.toml");
    let reports = run_ablation(&w.dataset, &axes(&["budget=2,4,6"]), &w.cfg, &w.backends, &w.index, 2).unwrap();
    assert_eq!(reports.len(), 3);
    let over_two = reports[0]
        .records
        .iter()
        .filter(|r| r.trace.bundle.as_ref().unwrap().triples.len() > 2)
        .count();
    assert!(over_two > 0, "fixture never exceeds the smallest budget");
    for (s, sample) in w.dataset.iter().enumerate() {
        let triples = reports[0].records[s].trace.bundle.as_ref().unwrap().triples.len();
        let hashes: Vec<&str> = reports
            .iter()
            .map(|r| r.records[s].trace.prompt_hash.as_deref().unwrap())
            .collect();
        for (a, ra) in reports.iter().enumerate() {
            for (b, rb) in reports.iter().enumerate().skip(a + 1) {
                // both budgets keep everything exactly when triples <= min budget
                let differ = triples > ra.budget.min(rb.budget);
                assert_eq!(
                    hashes[a] != hashes[b],
                    differ,
                    "sample {} with {triples} triples, budgets {} vs {}",
                    sample.sample_id,
                    ra.budget,
                    rb.budget
                );
            }
        }
    }
}

#[test]
fn empty_axes_give_single_default_report() {
    let w = world("mock_config.toml");
    let reports = run_ablation(&w.dataset, &AblationAxes::default(), &w.cfg, &w.backends, &w.index, 1).unwrap();
    assert_eq!(reports.len(), 1);
    let r = &reports[0];
    assert_eq!((r.mode, r.budget, r.order), (w.cfg.pipeline.retrieval.mode, 4, w.cfg.pipeline.prompt.order));
    assert_eq!(r.records.len(), 5);
    assert!((0.0..=1.0).contains(&r.aggregate));
}

#[test]
fn mode_axis_gates_channels() {
    let w = world("mock_config.toml");
    let reports = run_ablation(&w.dataset, &axes(&["mode=T,V,V+T"]), &w.cfg, &w.backends, &w.index, 1).unwrap();
    let by_mode: HashMap<RetrievalMode, _> = reports.iter().map(|r| (r.mode, r)).collect();
    for rec in &by_mode[&RetrievalMode::Text].records {
        let b = rec.trace.bundle.as_ref().unwrap();
        assert!(b.searched_images.is_empty() && b.patch_refs.is_empty(), "{}", rec.sample_id);
        assert!(!b.triples.is_empty());
    }
    for rec in &by_mode[&RetrievalMode::Visual].records {
        let b = rec.trace.bundle.as_ref().unwrap();
        assert!(b.triples.is_empty(), "{}", rec.sample_id);
        assert!(!b.searched_images.is_empty());
    }
    for rec in &by_mode[&RetrievalMode::VisualText].records {
        let b = rec.trace.bundle.as_ref().unwrap();
        assert!(!b.triples.is_empty() && !b.searched_images.is_empty(), "{}", rec.sample_id);
    }
}

#[test]
fn chain_is_truncated_to_max_subquestions() {
    let w = world("mock_config.toml");
    let panda = w.dataset.iter().find(|s| s.sample_id == "q4").unwrap();
    let t = answer_question(panda, &w.cfg, &w.backends, &w.index).unwrap();
    assert_eq!(t.chain.len(), 4);
    assert_eq!(t.answer, "bamboo");
    assert_eq!(t.bundle.triples.len(), 4);
}

#[test]
fn run_pipeline_matches_ablation_record() {
    let w = world("mock_config.toml");
    let reports = run_ablation(&w.dataset, &AblationAxes::default(), &w.cfg, &w.backends, &w.index, 1).unwrap();
    for (s, sample) in w.dataset.iter().enumerate() {
        assert_eq!(run_pipeline(sample, &w.cfg, &w.backends, &w.index), reports[0].records[s]);
    }
}

#[test]
fn missing_explanations_recorded_as_retrieval_error() {
    let mut w = world("mock_config.toml");
    let images: Vec<_> = w
        .index
        .entries()
        .iter()
        .filter(|e| e.kind == chainrag_core::retrieval::EntryKind::ImageDoc)
        .cloned()
        .collect();
    w.index = chainrag_core::retrieval::VectorIndex::build(images).unwrap();
    let rec = run_pipeline(&w.dataset[0], &w.cfg, &w.backends, &w.index);
    assert_eq!(rec.score, 0.0);
    assert_eq!(rec.error.unwrap().stage, Stage::Retrieval);
    assert!(rec.trace.chain.is_some());
}

#[test]
fn two_sample_report_round_trips() {
    let w = world("mock_config.toml");
    let reports = run_ablation(&w.dataset[..2], &AblationAxes::default(), &w.cfg, &w.backends, &w.index, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = emit_report(&reports[0], dir.path()).unwrap();
    assert_eq!(path.file_name().unwrap(), "report_mode-VT_k4_order-C_I_K.json");
    assert_eq!(read_report(&path).unwrap(), reports[0]);
    let text = std::fs::read_to_string(&path).unwrap();
    let config_at = text.find("\"config\"").unwrap();
    let records_at = text.find("\"records\"").unwrap();
    assert!(config_at < records_at);
}
