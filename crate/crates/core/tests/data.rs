use std::collections::BTreeSet;

use secreq_core::corpus::{apply_exclusions, ingest_asvs, ingest_frs, ExclusionConfig, REASON_DEPRECATED};
use secreq_core::datasets::{self, bundled_frs, PROJECTS};
use secreq_core::weighting::{compute_tf_idf, init_weight_table, Aggregation, WEIGHT_MAX, WEIGHT_MIN};

#[test]
fn bundled_asvs_chapter_counts() {
    let corpus = ingest_asvs(datasets::ASVS_4_0_3).unwrap();
    let counts = corpus.chapter_counts();
    let expected = [39, 57, 20, 9, 30, 16, 12, 17, 8, 10, 8, 15, 13, 24];
    for (ch, want) in (1u32..).zip(expected) {
        assert_eq!(counts[&ch], want, "chapter {ch}");
    }
    assert_eq!(corpus.len(), counts.values().sum::<usize>());
    assert_eq!(corpus.len() + corpus.count_excluded(REASON_DEPRECATED), 286);
    assert_eq!(corpus.source_version, "4.0.3");
}

#[test]
fn shipped_exclusions_all_match() {
    let corpus = ingest_asvs(datasets::ASVS_4_0_3).unwrap();
    let prefixes = ExclusionConfig::from_json(datasets::EXCLUSIONS).unwrap().prefixes();
    let (kept, outcome) = apply_exclusions(&corpus, &prefixes);
    assert!(outcome.unmatched.is_empty());
    assert_eq!(outcome.removed, 36);
    assert_eq!(kept.len(), corpus.len() - 36);
    assert!(kept.records.iter().all(|r| !prefixes.iter().any(|p| r.id.has_prefix(p))));
}

#[test]
fn bundled_fr_datasets() {
    let mut total = 0;
    for (project, want) in PROJECTS.iter().zip([41, 169, 113]) {
        let (set, rejected) = ingest_frs(bundled_frs(project).unwrap(), project).unwrap();
        assert!(rejected.is_empty(), "{project}: {rejected:?}");
        assert_eq!(set.len(), want, "{project}");
        let ids: BTreeSet<&str> = set.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), want);
        total += set.len();
    }
    assert_eq!(total, 323);
    assert!(bundled_frs("EPURSE").is_some());
    assert!(bundled_frs("other").is_none());
}

/// Only near-ubiquitous tokens may hit the lower clamp on the real corpus, and
/// nothing reaches the upper one.
#[test]
fn initial_weights_on_bundled_corpus() {
    let corpus = ingest_asvs(datasets::ASVS_4_0_3).unwrap();
    let prefixes = ExclusionConfig::from_json(datasets::EXCLUSIONS).unwrap().prefixes();
    let (corpus, _) = apply_exclusions(&corpus, &prefixes);
    let tfidf = compute_tf_idf(&corpus).unwrap();
    for agg in [Aggregation::Mean, Aggregation::Max, Aggregation::IdfOnly] {
        let (table, report) = init_weight_table(&tfidf, agg).unwrap();
        assert!(table.weights.values().all(|w| (WEIGHT_MIN..=WEIGHT_MAX).contains(w)));
        assert!(report.clamped_high.is_empty(), "{agg:?}: {:?}", report.clamped_high);
        for t in &report.clamped_low {
            let share = tfidf.doc_freq[t] as f64 / tfidf.corpus_size as f64;
            assert!(share > 0.5, "{agg:?}: {t} clamped low but in only {share:.2} of VRs");
        }
        assert!(report.clamped() * 100 < report.vocabulary, "{agg:?}: too many clamped");
    }
}
