//! Evaluation mathematics: self-information, BLEU / Self-BLEU, vocabulary
//! size, retrieval accuracy, ICC(2,k), Welch's t-test and sample sizing.

mod bleu;
mod stats;

pub use bleu::{bleu, self_bleu, ScopedText, SelfBleuItem, SelfBleuReport, DEFAULT_EPSILON, DEFAULT_MAX_N};
pub use stats::{
    f_upper_tail, icc_2k, ln_gamma, reg_inc_beta, student_t_two_sided, welch_t, IccResult, WelchResult,
};

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::llm::{token_logprobs, GatewayError, LmScorer};
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("text is empty")]
    EmptyText,
    #[error("no references given")]
    NoReferences,
    #[error("sample too small: {0}")]
    SampleTooSmall(usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("bad shape: {0}")]
    Shape(String),
    #[error("invalid sample-size spec: {0}")]
    SampleSpec(String),
    #[error("cannot draw {n} items from {size}")]
    SampleExceedsPopulation { n: usize, size: usize },
    #[error("no labeled pairs")]
    NoPairs,
    #[error(transparent)]
    Scorer(#[from] GatewayError),
}

/// Self-information in bits of `text` under `scorer`; 0 when out of scope.
pub fn self_information(text: &str, scorer: &dyn LmScorer, in_scope: bool) -> Result<f64, MetricsError> {
    if !in_scope {
        return Ok(0.0);
    }
    if text.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    let lp = token_logprobs(scorer, text)?;
    Ok(-lp.iter().map(|t| t.logprob).sum::<f64>() / std::f64::consts::LN_2)
}

/// Unique tokens across in-scope texts.
pub fn vocabulary_size<S: AsRef<str>>(texts: &[S], in_scope: &[bool]) -> usize {
    texts
        .iter()
        .zip(in_scope)
        .filter(|(_, s)| **s)
        .flat_map(|(t, _)| tokenize(t.as_ref()).tokens)
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub project: String,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub relevant: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn new(relevant: usize, total: usize) -> Self {
        Accuracy {
            relevant,
            total,
            accuracy: relevant as f64 / total as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_project: BTreeMap<String, Accuracy>,
    /// Pooled over all pairs.
    pub overall: Accuracy,
}

pub fn retrieval_accuracy(pairs: &[LabeledPair]) -> Result<AccuracyReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in pairs {
        let e = counts.entry(p.project.clone()).or_default();
        e.0 += usize::from(p.relevant);
        e.1 += 1;
    }
    let relevant = pairs.iter().filter(|p| p.relevant).count();
    Ok(AccuracyReport {
        per_project: counts.into_iter().map(|(k, (r, t))| (k, Accuracy::new(r, t))).collect(),
        overall: Accuracy::new(relevant, pairs.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeSpec {
    /// `None` for an unbounded population.
    pub population: Option<u64>,
    pub confidence: f64,
    pub margin: f64,
    pub proportion: f64,
}

impl Default for SampleSizeSpec {
    fn default() -> Self {
        SampleSizeSpec {
            population: None,
            confidence: 0.95,
            margin: 0.05,
            proportion: 0.5,
        }
    }
}

/// Cochran's sample size with the finite-population correction.
pub fn min_sample_size(spec: &SampleSizeSpec) -> Result<u64, MetricsError> {
    let bad = |m: &str| Err(MetricsError::SampleSpec(m.to_string()));
    if !(spec.margin > 0.0 && spec.margin < 1.0) {
        return bad("margin must be in (0, 1)");
    }
    if !(spec.proportion > 0.0 && spec.proportion < 1.0) {
        return bad("proportion must be in (0, 1)");
    }
    if !(spec.confidence > 0.0 && spec.confidence < 1.0) {
        return bad("confidence must be in (0, 1)");
    }
    if spec.population == Some(0) {
        return bad("population must be positive");
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - (1.0 - spec.confidence) / 2.0);
    let n0 = z * z * spec.proportion * (1.0 - spec.proportion) / (spec.margin * spec.margin);
    let n = match spec.population {
        None => n0,
        Some(pop) => n0 / (1.0 + (n0 - 1.0) / pop as f64),
    };
    let n = n.ceil() as u64;
    Ok(match spec.population {
        Some(pop) => n.min(pop),
        None => n,
    })
}

/// Seeded uniform sample of `n` distinct items, in draw order.
pub fn sample_without_replacement<T: Clone>(population: &[T], n: usize, seed: u64) -> Result<Vec<T>, MetricsError> {
    if n > population.len() {
        return Err(MetricsError::SampleExceedsPopulation { n, size: population.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, population.len(), n)
        .into_iter()
        .map(|i| population[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::UnigramScorer;

    #[test]
    fn si_examples() {
        let s = UnigramScorer::uniform(["a", "b", "c", "d"]);
        assert!((self_information("a b c", &s, true).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(self_information("a b c", &s, false).unwrap(), 0.0);
        assert!(matches!(self_information("", &s, true), Err(MetricsError::EmptyText)));
    }

    #[test]
    fn vocabulary_examples() {
        let t = ["verify tls", "verify session"];
        assert_eq!(vocabulary_size(&t, &[true, true]), 3);
        assert_eq!(vocabulary_size(&t, &[true, false]), 2);
        assert_eq!(vocabulary_size(&t, &[false, false]), 0);
    }

    #[test]
    fn accuracy_arithmetic() {
        fn mk(p: &str, r: usize, t: usize) -> Vec<LabeledPair> {
            (0..t).map(|i| LabeledPair { project: p.to_string(), relevant: i < r }).collect()
        }
        let pairs = [mk("A", 22, 26), mk("B", 150, 188)].concat();
        let rep = retrieval_accuracy(&pairs).unwrap();
        assert!((rep.per_project["A"].accuracy - 0.846).abs() < 5e-4);
        assert_eq!((rep.overall.relevant, rep.overall.total), (172, 214));
        assert!((rep.overall.accuracy - 0.804).abs() < 5e-4);
        assert!(retrieval_accuracy(&[]).is_err());
    }

    #[test]
    fn sample_sizes() {
        assert_eq!(min_sample_size(&SampleSizeSpec::default()).unwrap(), 385);
        let finite = SampleSizeSpec { population: Some(470), ..Default::default() };
        assert_eq!(min_sample_size(&finite).unwrap(), 212);
        let wide = SampleSizeSpec { population: Some(3), margin: 0.5, ..Default::default() };
        assert!(min_sample_size(&wide).unwrap() <= 3);
        assert!(min_sample_size(&SampleSizeSpec { margin: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn sampling() {
        let pop: Vec<u32> = (0..20).collect();
        let mut all = sample_without_replacement(&pop, 20, 3).unwrap();
        all.sort();
        assert_eq!(all, pop);
        assert_eq!(
            sample_without_replacement(&pop, 5, 3).unwrap(),
            sample_without_replacement(&pop, 5, 3).unwrap()
        );
        assert!(sample_without_replacement(&pop, 0, 3).unwrap().is_empty());
        assert!(sample_without_replacement(&pop, 21, 3).is_err());
    }
}
