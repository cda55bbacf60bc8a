mod common;

use std::sync::Arc;

use common::fixture_dir;
use secreq_core::corpus::{apply_exclusions, ingest_asvs, ingest_frs, ExclusionConfig, FrSet, VrCorpus};
use secreq_core::generation::{
    build_generation_prompt, consolidate_duplicates, derive_srs, DeriveOptions, GenerationTemplate, SrSet,
};
use secreq_core::llm::{MockScript, ScriptedMock};
use secreq_core::retriever::{build_index, VrIndex};
use secreq_core::scope::{filter_out_of_scope, KeywordConfig};
use secreq_core::text::HashEmbedder;
use secreq_core::weighting::{corpus_vocabulary, TokenWeightTable};

fn mini() -> (VrCorpus, FrSet, VrIndex) {
    let dir = fixture_dir().join("mini");
    let read = |f: &str| std::fs::read_to_string(dir.join(f)).unwrap();
    let full = ingest_asvs(&read("asvs.json")).unwrap();
    let (corpus, _) = apply_exclusions(&full, &ExclusionConfig::from_json(&read("exclusions.json")).unwrap().prefixes());
    let (frs, _) = ingest_frs(&read("epurse.jsonl"), "ePurse").unwrap();
    let vocab = corpus_vocabulary(&corpus);
    let table = TokenWeightTable::uniform(vocab.iter().map(String::as_str));
    let index = build_index(&corpus, Arc::new(HashEmbedder::new(32, 1)), table, None).unwrap();
    (corpus, frs, index)
}

/// Record a response for every (FR, top-k VR) prompt except those `skip`
/// rejects; odd ranks get the sentinel.
fn script(corpus: &VrCorpus, frs: &FrSet, index: &VrIndex, k: usize, skip: impl Fn(&str) -> bool) -> MockScript {
    let template = GenerationTemplate::default_template();
    let mut script = MockScript::default();
    for fr in &frs.records {
        if skip(&fr.id) {
            continue;
        }
        for hit in index.retrieve_top_k(&fr.text, k).unwrap() {
            let prompt = build_generation_prompt(fr, corpus.get(&hit.vr_id).unwrap(), &template).unwrap();
            let reply = if hit.rank % 2 == 1 {
                format!("  {}\n", template.sentinel)
            } else {
                format!("The {} POS terminal shall enforce requirement {}.", fr.id, hit.vr_id)
            };
            script.insert(&prompt.to_request("m").messages, reply);
        }
    }
    script
}

#[test]
fn scripted_generation_gates_and_records_failures() {
    let (corpus, frs, index) = mini();
    let k = 3;
    let mock = ScriptedMock::new(script(&corpus, &frs, &index, k, |id| id == "EP-002"));
    let opts = DeriveOptions {
        k,
        model_id: "m".into(),
        ..DeriveOptions::default()
    };
    let set = derive_srs(&frs, &index, &corpus, &GenerationTemplate::default_template(), &mock, &opts).unwrap();
    let m = &set.manifest;
    assert_eq!(m.attempted, frs.len() * k);
    assert_eq!(m.failed, k);
    assert!(set.failures.iter().all(|f| f.fr_id == "EP-002"));
    assert_eq!(m.gated, (frs.len() - 1) * 2);
    assert_eq!(m.generated, frs.len() - 1);
    assert!(set.records.iter().filter(|r| r.gated).all(|r| r.text.is_empty() && r.rank % 2 == 1));
    assert_eq!(m.attempted, m.generated + m.gated + m.failed);

    let lines = SrSet::records_from_jsonl(&set.to_jsonl()).unwrap();
    assert_eq!(lines, set.records);
    assert!(consolidate_duplicates(&set.records, 0.8).len() <= set.generated().count());
}

#[test]
fn generated_pos_srs_are_foreign_to_gps() {
    let (corpus, frs, index) = mini();
    let mock = ScriptedMock::new(script(&corpus, &frs, &index, 2, |_| false));
    let opts = DeriveOptions {
        k: 2,
        model_id: "m".into(),
        ..DeriveOptions::default()
    };
    let set = derive_srs(&frs, &index, &corpus, &GenerationTemplate::default_template(), &mock, &opts).unwrap();
    let texts: Vec<&str> = set.generated().map(|r| r.text.as_str()).collect();
    assert!(!texts.is_empty());
    let keywords = KeywordConfig::default_config();
    let as_gps = filter_out_of_scope(&texts, "GPS", &keywords).unwrap();
    assert!(as_gps.iter().all(|d| !d.in_scope && d.matched_keyword.as_deref() == Some("pos")));
    let as_epurse = filter_out_of_scope(&texts, "epurse", &keywords).unwrap();
    assert!(as_epurse.iter().all(|d| d.in_scope));
}
