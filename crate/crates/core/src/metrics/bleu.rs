use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::MetricsError;
use crate::text::tokenize;

pub const DEFAULT_MAX_N: usize = 4;
pub const DEFAULT_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform n-gram weights. A precision with no matches,
/// or with no candidate n-grams of that order, is replaced by `epsilon`.
/// The brevity penalty uses the reference length closest to the candidate
/// length (shorter wins ties).
pub fn bleu<S: AsRef<str>>(candidate: &str, references: &[S], max_n: usize, epsilon: f64) -> Result<f64, MetricsError> {
    let cand = tokenize(candidate).tokens;
    if cand.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    if max_n == 0 {
        return Err(MetricsError::Shape("max_n must be positive".into()));
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref()).tokens).collect();
    let mut log_sum = 0.0;
    let mut max_p = 0.0f64;
    for n in 1..=max_n {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand_counts
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if total == 0 || clipped == 0 {
            epsilon
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
        max_p = max_p.max(p);
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    // The clamp only absorbs exp/ln rounding; a geometric mean never
    // exceeds its largest term.
    let geo = (log_sum / max_n as f64).exp().min(max_p);
    Ok(bp * geo)
}

/// One generated SR with its scope flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopedText {
    pub text: String,
    pub in_scope: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfBleuItem {
    pub fr_id: String,
    /// Index into that FR's SR list.
    pub selected: usize,
    pub in_scope: bool,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfBleuReport {
    pub items: Vec<SelfBleuItem>,
    pub mean: f64,
    pub excluded_frs: Vec<String>,
}

/// Pick one SR per FR (seeded, FRs in id order), then score each in-scope
/// pick by BLEU against all other picks; out-of-scope picks score 1.
pub fn self_bleu(
    per_fr: &BTreeMap<String, Vec<ScopedText>>,
    seed: u64,
    max_n: usize,
    epsilon: f64,
) -> Result<SelfBleuReport, MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(&String, usize, &ScopedText)> = Vec::new();
    let mut excluded = Vec::new();
    for (fr, srs) in per_fr {
        if srs.is_empty() {
            warn!(fr = %fr, "FR has no SRs; excluded from Self-BLEU");
            excluded.push(fr.clone());
            continue;
        }
        let i = rng.random_range(0..srs.len());
        picks.push((fr, i, &srs[i]));
    }
    if picks.len() < 2 {
        return Err(MetricsError::SampleTooSmall(picks.len()));
    }
    let mut items = Vec::with_capacity(picks.len());
    for (i, (fr, sel, sr)) in picks.iter().enumerate() {
        let value = if sr.in_scope {
            let refs: Vec<&str> = picks
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| p.2.text.as_str())
                .collect();
            bleu(&sr.text, &refs, max_n, epsilon)?
        } else {
            1.0
        };
        items.push(SelfBleuItem {
            fr_id: (*fr).clone(),
            selected: *sel,
            in_scope: sr.in_scope,
            value,
        });
    }
    let mean = items.iter().map(|i| i.value).sum::<f64>() / items.len() as f64;
    Ok(SelfBleuReport {
        items,
        mean,
        excluded_frs: excluded,
    })
}
