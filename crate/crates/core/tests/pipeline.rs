mod common;

use std::fs;
use std::time::Instant;

use common::mini_config;
use secreq_core::pipeline::{ChatConfig, Pipeline, PipelineError, Stage};
use secreq_core::retriever::load_index;
use secreq_core::synthesis::{from_jsonl, rank_filter, CandidatePair, FilteredPair};

fn read(p: &std::path::Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn two_runs_give_identical_bundles() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    let mut pa = Pipeline::open(mini_config(a.path())).unwrap();
    let ba = pa.end_to_end().unwrap();
    let mut pb = Pipeline::open(mini_config(b.path())).unwrap();
    let bb = pb.end_to_end().unwrap();
    assert!(start.elapsed().as_secs() < 60);
    assert_eq!(pa.run_hash(), pb.run_hash());
    assert_eq!(fs::read(ba.bundle_path()).unwrap(), fs::read(bb.bundle_path()).unwrap());
    for art in &ba.artifacts {
        assert_eq!(fs::read(pa.run_dir().join(&art.path)).unwrap(), fs::read(pb.run_dir().join(&art.path)).unwrap());
    }
    assert_eq!(ba.manifest.phase_one, "trained");
    assert!(ba.failures.is_empty());
    assert_eq!(ba.manifest.in_scope_vrs, 20);
}

#[test]
fn completed_run_resumes_without_work() {
    let dir = tempfile::tempdir().unwrap();
    let first = Pipeline::open(mini_config(dir.path())).unwrap().end_to_end().unwrap();
    let mut again = Pipeline::open(mini_config(dir.path())).unwrap();
    let second = again.end_to_end().unwrap();
    assert!(again.executed_stages().is_empty());
    // A completed train stage short-circuits synthesis, filtering and split.
    for s in [Stage::Train, Stage::BuildIndex, Stage::Generate, Stage::Evaluate, Stage::Report] {
        assert!(again.resumed_stages().contains(&s), "{s:?}");
    }
    assert_eq!(read(&first.bundle_path()), read(&second.bundle_path()));
}

#[test]
fn resume_after_training_skips_phase_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(mini_config(dir.path())).unwrap();
    let bundle = p.end_to_end().unwrap();
    let original = read(&bundle.bundle_path());
    for s in &Stage::ALL[6..] {
        fs::remove_dir_all(p.stage_dir(*s)).unwrap();
    }
    let mut p = Pipeline::open(mini_config(dir.path())).unwrap();
    let again = p.end_to_end().unwrap();
    assert!(p.resumed_stages().contains(&Stage::Train));
    for s in [Stage::SynthPairs, Stage::FilterPairs, Stage::Split, Stage::Train] {
        assert!(!p.executed_stages().contains(&s), "{s:?} reran");
    }
    assert!(p.executed_stages().contains(&Stage::BuildIndex));
    assert_eq!(original, read(&again.bundle_path()));
}

#[test]
fn incomplete_stage_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(mini_config(dir.path())).unwrap();
    p.ingest_asvs().unwrap();
    let stage_dir = p.stage_dir(Stage::IngestFrs);
    fs::create_dir_all(&stage_dir).unwrap();
    fs::write(stage_dir.join("partial.jsonl"), "garbage").unwrap();
    p.ingest_frs().unwrap();
    assert!(!stage_dir.join("partial.jsonl").exists());
    assert!(stage_dir.join("stage.json").exists());
}

#[test]
fn tampered_artifact_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(mini_config(dir.path())).unwrap();
    p.end_to_end().unwrap();
    let f = p.stage_dir(Stage::Generate).join("srs-GPS.jsonl");
    fs::write(&f, read(&f).replace("shall", "must")).unwrap();
    let mut p = Pipeline::open(mini_config(dir.path())).unwrap();
    assert!(matches!(p.end_to_end(), Err(PipelineError::Artifact { .. })));
}

#[test]
fn provided_weights_skip_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(mini_config(dir.path())).unwrap();
    let table = p.train().unwrap();
    let weights = dir.path().join("weights.json");
    fs::write(&weights, table.to_json()).unwrap();

    let out = tempfile::tempdir().unwrap();
    let mut config = mini_config(out.path());
    config.trained_weights = Some(weights);
    let mut p = Pipeline::open(config).unwrap();
    let bundle = p.end_to_end().unwrap();
    assert!(p.phase_one_skipped());
    assert!(!p.stage_dir(Stage::SynthPairs).exists());
    assert_eq!(bundle.manifest.phase_one, "provided-weights");
    assert_eq!(bundle.manifest.table_version, table.version);
}

#[test]
fn stage_failure_leaves_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    fs::write(&script, "{}").unwrap();
    let mut config = mini_config(dir.path());
    config.chat = ChatConfig::Scripted { script };
    let mut p = Pipeline::open(config).unwrap();
    let err = p.end_to_end().unwrap_err();
    assert_eq!(err.kind(), "synthesis");
    let failure: serde_json::Value = serde_json::from_str(&read(&p.run_dir().join("failure.json"))).unwrap();
    assert_eq!(failure["kind"], "synthesis");
    // Every VR failed, so no pairs survive to the split, but earlier stages are intact.
    assert!(p.stage_record(Stage::SynthPairs).unwrap().is_some());
    let failures: Vec<String> = serde_json::from_str(&read(&p.stage_dir(Stage::SynthPairs).join("failures.json"))).unwrap();
    assert_eq!(failures.len(), 20);
    assert!(p.stage_record(Stage::Split).unwrap().is_none());
}

#[test]
fn filter_decisions_reproduce_from_saved_index() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(mini_config(dir.path())).unwrap();
    let filtered = p.filter_pairs().unwrap();
    let candidates: Vec<CandidatePair> = from_jsonl(&read(&p.stage_dir(Stage::SynthPairs).join("candidates.jsonl"))).unwrap();
    assert_eq!(candidates.len(), 200);
    let index = load_index(&p.stage_dir(Stage::FilterPairs).join("zero-shot-index"), p.corpus()).unwrap();
    let decisions = rank_filter(&candidates, &index, 0.3).unwrap();
    let accepted: Vec<bool> = decisions.iter().map(|d| d.accepted).collect();
    assert_eq!(accepted, filtered.iter().map(|f| f.accepted).collect::<Vec<_>>());
    let persisted: Vec<FilteredPair> = from_jsonl(&read(&p.stage_dir(Stage::FilterPairs).join("filtered.jsonl"))).unwrap();
    assert_eq!(persisted, filtered);

    let mut previous: Option<Vec<bool>> = None;
    for f in [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0] {
        let acc: Vec<bool> = rank_filter(&candidates, &index, f).unwrap().iter().map(|d| d.accepted).collect();
        if let Some(prev) = &previous {
            assert!(prev.iter().zip(&acc).all(|(a, b)| !a || *b), "acceptance shrank at fraction {f}");
        }
        previous = Some(acc);
    }
    assert!(previous.unwrap().iter().all(|a| *a));
}
