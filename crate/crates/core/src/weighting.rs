//! TF-IDF over the VR corpus and the trainable per-token weight table.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VrCorpus;
use crate::text::{tokenize, TokenSequence};

pub const WEIGHT_MIN: f64 = 0.05;
pub const WEIGHT_MAX: f64 = 20.0;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("TF-IDF needs at least one non-empty document")]
    EmptyCorpus,
    #[error("every token has zero TF-IDF weight; the corpus cannot discriminate")]
    DegenerateCorpus,
    #[error("malformed weight table: {0}")]
    Format(String),
}

/// Per-(token, document) TF-IDF with `tf = count / len` and `idf = ln(D / df)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfTable {
    /// Document key -> token -> tf-idf. Only tokens present in the document.
    pub entries: BTreeMap<String, BTreeMap<String, f64>>,
    pub doc_freq: BTreeMap<String, usize>,
    pub corpus_size: usize,
}

impl TfIdfTable {
    pub fn get(&self, token: &str, doc: &str) -> Option<f64> {
        self.entries.get(doc)?.get(token).copied()
    }

    pub fn idf(&self, token: &str) -> Option<f64> {
        let df = *self.doc_freq.get(token)?;
        Some((self.corpus_size as f64 / df as f64).ln())
    }
}

pub fn compute_tf_idf(corpus: &VrCorpus) -> Result<TfIdfTable, WeightError> {
    let docs: Vec<(String, TokenSequence)> = corpus
        .records
        .iter()
        .map(|r| (r.id.to_string(), tokenize(&r.composed_text)))
        .collect();
    compute_tf_idf_docs(&docs)
}

pub fn compute_tf_idf_docs(docs: &[(String, TokenSequence)]) -> Result<TfIdfTable, WeightError> {
    if docs.is_empty() || docs.iter().all(|(_, seq)| seq.is_empty()) {
        return Err(WeightError::EmptyCorpus);
    }
    let corpus_size = docs.len();
    let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut counts: Vec<BTreeMap<&str, usize>> = Vec::with_capacity(docs.len());
    for (_, seq) in docs {
        let mut c: BTreeMap<&str, usize> = BTreeMap::new();
        for t in seq.iter() {
            *c.entry(t).or_insert(0) += 1;
        }
        for t in c.keys() {
            *doc_freq.entry((*t).to_string()).or_insert(0) += 1;
        }
        counts.push(c);
    }
    let mut entries = BTreeMap::new();
    for ((key, seq), c) in docs.iter().zip(&counts) {
        let len = seq.len() as f64;
        let row: BTreeMap<String, f64> = c
            .iter()
            .map(|(t, n)| {
                let idf = (corpus_size as f64 / doc_freq[*t] as f64).ln();
                ((*t).to_string(), *n as f64 / len * idf)
            })
            .collect();
        entries.insert(key.clone(), row);
    }
    Ok(TfIdfTable {
        entries,
        doc_freq,
        corpus_size,
    })
}

/// How per-document TF-IDF values fold into one weight per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    IdfOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeightTable {
    pub version: u64,
    pub default_weight: f64,
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub trained: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitReport {
    pub vocabulary: usize,
    pub clamped_low: Vec<String>,
    pub clamped_high: Vec<String>,
}

impl InitReport {
    pub fn clamped(&self) -> usize {
        self.clamped_low.len() + self.clamped_high.len()
    }
}

impl TokenWeightTable {
    /// Every weight 1.0: the zero-shot configuration.
    pub fn uniform<'a>(vocabulary: impl IntoIterator<Item = &'a str>) -> Self {
        TokenWeightTable {
            version: 0,
            default_weight: 1.0,
            weights: vocabulary.into_iter().map(|t| (t.to_string(), 1.0)).collect(),
            trained: false,
        }
    }

    pub fn weight(&self, token: &str) -> f64 {
        self.weights.get(token).copied().unwrap_or(self.default_weight)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }

    pub fn mean_weight(&self) -> f64 {
        if self.weights.is_empty() {
            return self.default_weight;
        }
        self.weights.values().sum::<f64>() / self.weights.len() as f64
    }

    /// Same table with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut t = self.clone();
        t.weights.values_mut().for_each(|w| *w *= c);
        t.default_weight *= c;
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weight table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, WeightError> {
        let t: TokenWeightTable =
            serde_json::from_str(s).map_err(|e| WeightError::Format(e.to_string()))?;
        if !(t.default_weight > 0.0) {
            return Err(WeightError::Format("default_weight must be positive".into()));
        }
        if let Some((tok, w)) = t.weights.iter().find(|(_, w)| !(**w > 0.0) || !w.is_finite()) {
            return Err(WeightError::Format(format!("weight for {tok:?} is {w}")));
        }
        Ok(t)
    }
}

/// Fold TF-IDF into one raw value per token, rescale so the vocabulary mean
/// is 1, then clamp into `[WEIGHT_MIN, WEIGHT_MAX]`. Tokens outside the
/// vocabulary get weight 1.
pub fn init_weight_table(
    tfidf: &TfIdfTable,
    aggregation: Aggregation,
) -> Result<(TokenWeightTable, InitReport), WeightError> {
    if tfidf.doc_freq.is_empty() {
        return Err(WeightError::EmptyCorpus);
    }
    let mut sums: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for row in tfidf.entries.values() {
        for (t, v) in row {
            let e = sums.entry(t.as_str()).or_insert((0.0, f64::NEG_INFINITY, 0));
            e.0 += v;
            e.1 = e.1.max(*v);
            e.2 += 1;
        }
    }
    let raw: BTreeMap<&str, f64> = sums
        .iter()
        .map(|(t, (sum, max, n))| {
            let v = match aggregation {
                Aggregation::Mean => sum / *n as f64,
                Aggregation::Max => *max,
                Aggregation::IdfOnly => tfidf.idf(t).unwrap_or(0.0),
            };
            (*t, v)
        })
        .collect();
    let total: f64 = raw.values().sum();
    if !(total > 0.0) {
        return Err(WeightError::DegenerateCorpus);
    }
    let scale = raw.len() as f64 / total;
    let mut report = InitReport {
        vocabulary: raw.len(),
        ..InitReport::default()
    };
    let weights = raw
        .into_iter()
        .map(|(t, v)| {
            let w = v * scale;
            let clamped = if w < WEIGHT_MIN {
                report.clamped_low.push(t.to_string());
                WEIGHT_MIN
            } else if w > WEIGHT_MAX {
                report.clamped_high.push(t.to_string());
                WEIGHT_MAX
            } else {
                w
            };
            (t.to_string(), clamped)
        })
        .collect();
    Ok((
        TokenWeightTable {
            version: 1,
            default_weight: 1.0,
            weights,
            trained: false,
        },
        report,
    ))
}

pub fn lookup_weights(table: &TokenWeightTable, seq: &TokenSequence) -> Vec<f64> {
    seq.iter().map(|t| table.weight(t)).collect()
}

/// Distinct tokens across the corpus, in sorted order.
pub fn corpus_vocabulary(corpus: &VrCorpus) -> BTreeSet<String> {
    corpus
        .records
        .iter()
        .flat_map(|r| tokenize(&r.composed_text).tokens)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(texts: &[&str]) -> Vec<(String, TokenSequence)> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("d{}", i + 1), tokenize(t)))
            .collect()
    }

    #[test]
    fn tf_idf_matches_hand_computation() {
        let t = compute_tf_idf_docs(&docs(&[
            "login password login",
            "session token",
            "password reset",
        ]))
        .unwrap();
        // (2/3) ln 3 and (1/3) ln(3/2)
        assert!((t.get("login", "d1").unwrap() - 0.732_408_192_445_406).abs() < 1e-12);
        assert!((t.get("password", "d1").unwrap() - 0.135_155_036_036_055).abs() < 1e-12);
        assert_eq!(t.doc_freq["password"], 2);
        assert!(t.get("session", "d1").is_none());
    }

    #[test]
    fn ubiquitous_token_has_zero_idf() {
        let t = compute_tf_idf_docs(&docs(&["a b", "a c", "a d"])).unwrap();
        assert_eq!(t.idf("a"), Some(0.0));
        for d in ["d1", "d2", "d3"] {
            assert_eq!(t.get("a", d), Some(0.0));
        }
        let same = compute_tf_idf_docs(&docs(&["x y", "x y"])).unwrap();
        assert!(same.doc_freq.keys().all(|tok| same.idf(tok) == Some(0.0)));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(compute_tf_idf_docs(&[]), Err(WeightError::EmptyCorpus)));
    }

    #[test]
    fn single_doc_symmetric_tokens_weigh_one() {
        // D = 1 gives idf 0 everywhere, so this is degenerate.
        let t = compute_tf_idf_docs(&docs(&["a b"])).unwrap();
        assert!(matches!(
            init_weight_table(&t, Aggregation::Mean),
            Err(WeightError::DegenerateCorpus)
        ));
        // Two tokens with equal tf-idf in a discriminating corpus.
        let t = compute_tf_idf_docs(&docs(&["a b", "c d"])).unwrap();
        let (w, report) = init_weight_table(&t, Aggregation::Mean).unwrap();
        assert_eq!(report.clamped(), 0);
        for tok in ["a", "b", "c", "d"] {
            assert!((w.weight(tok) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rarer_denser_token_outweighs_common_one() {
        let t = compute_tf_idf_docs(&docs(&[
            "login password login",
            "session token",
            "password reset",
        ]))
        .unwrap();
        let (w, _) = init_weight_table(&t, Aggregation::Mean).unwrap();
        assert!(w.weight("login") > w.weight("password"));
        assert!((w.mean_weight() - 1.0).abs() < 1e-9);
        assert_eq!(w.weight("zzz"), 1.0);
        assert!(w.weights.values().all(|v| *v > 0.0));
    }

    #[test]
    fn aggregation_variants_differ_only_in_fold() {
        let t = compute_tf_idf_docs(&docs(&["a a b", "a c", "d"])).unwrap();
        let (mean, _) = init_weight_table(&t, Aggregation::Mean).unwrap();
        let (max, _) = init_weight_table(&t, Aggregation::Max).unwrap();
        let (idf, _) = init_weight_table(&t, Aggregation::IdfOnly).unwrap();
        // "b", "c", "d" each occur in one doc with idf ln 3; "d" fills its doc.
        assert!(mean.weight("d") > mean.weight("c"));
        assert!(max.weight("a") >= mean.weight("a") - 1e-12);
        assert!((idf.weight("b") - idf.weight("d")).abs() < 1e-12);
    }

    #[test]
    fn lookup_uses_default_for_oov() {
        let mut table = TokenWeightTable::uniform(["a", "b"]);
        table.weights.insert("a".into(), 2.0);
        table.weights.insert("b".into(), 0.5);
        assert_eq!(lookup_weights(&table, &tokenize("a b a")), vec![2.0, 0.5, 2.0]);
        assert!(lookup_weights(&table, &tokenize("")).is_empty());
        assert_eq!(lookup_weights(&table, &tokenize("x y")), vec![1.0, 1.0]);
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let mut table = TokenWeightTable::uniform(["a"]);
        table.weights.insert("b".into(), 0.1 + 0.2);
        let back = TokenWeightTable::from_json(&table.to_json()).unwrap();
        assert_eq!(back, table);
        assert!(TokenWeightTable::from_json(
            r#"{"version":1,"default_weight":1.0,"weights":{"a":0.0}}"#
        )
        .is_err());
    }
}
