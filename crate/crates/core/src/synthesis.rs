//! Synthetic FR generation per VR, zero-shot rank filtering and the
//! train/validation split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::corpus::{VrCorpus, VrId, VrRecord};
use crate::llm::{chat_all, ChatBackend, ChatMessage, ChatRequest, GatewayError};
use crate::prompt::{render, require_slots, TemplateError};
use crate::retriever::{RetrieverError, VrIndex};

pub const DEFAULT_SYNTHESIS_TEMPLATE: &str = include_str!("../data/prompts/synthesis.json");

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("requested count must be at least 1")]
    ZeroCount,
    #[error("response for {vr_id} has no list structure")]
    Parse { vr_id: String, raw: String },
    #[error("gateway failure for {vr_id}: {source}")]
    Gateway {
        vr_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error("invalid filter fraction {0}; expected (0, 1]")]
    Fraction(f64),
    #[error("split ratio must sum to 1 with positive parts, got ({0}, {1})")]
    Ratio(f64, f64),
    #[error("need at least 10 pairs to split, got {0}")]
    TooFewPairs(usize),
    #[error("pair file line {line}: {message}")]
    PairFile { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub vr: String,
    pub fr: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTemplate {
    pub template_id: String,
    pub instruction: String,
    pub good_example: Exemplar,
    pub bad_examples: Vec<Exemplar>,
    pub layout: String,
}

const SYNTHESIS_SLOTS: [&str; 7] = [
    "instruction",
    "good_vr",
    "good_fr",
    "good_reason",
    "bad_examples",
    "target_vr",
    "count",
];

impl SynthesisTemplate {
    pub fn from_json(s: &str) -> Result<Self, TemplateError> {
        let t: SynthesisTemplate = serde_json::from_str(s).map_err(|e| TemplateError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn default_template() -> Self {
        Self::from_json(DEFAULT_SYNTHESIS_TEMPLATE).expect("bundled synthesis template")
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let invalid = |message: String| TemplateError::Invalid {
            template: self.template_id.clone(),
            message,
        };
        if self.bad_examples.len() != 3 {
            return Err(invalid(format!(
                "expected exactly 3 bad examples, found {}",
                self.bad_examples.len()
            )));
        }
        for (name, e) in std::iter::once(("good_example", &self.good_example))
            .chain(self.bad_examples.iter().map(|e| ("bad_examples", e)))
        {
            if e.vr.trim().is_empty() || e.fr.trim().is_empty() || e.reason.trim().is_empty() {
                return Err(invalid(format!("{name} has an empty field")));
            }
        }
        if self.instruction.trim().is_empty() {
            return Err(TemplateError::MissingSlot {
                template: self.template_id.clone(),
                slot: "instruction".into(),
            });
        }
        require_slots(&self.template_id, &self.layout, &SYNTHESIS_SLOTS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisPrompt {
    pub template_id: String,
    pub vr_id: VrId,
    pub target_vr: String,
    pub requested_count: usize,
    pub text: String,
}

impl SynthesisPrompt {
    pub fn to_request(&self, model_id: &str) -> ChatRequest {
        ChatRequest::new(model_id, vec![ChatMessage::user(self.text.clone())])
    }
}

pub fn build_synthesis_prompt(
    vr: &VrRecord,
    template: &SynthesisTemplate,
    count: usize,
) -> Result<SynthesisPrompt, SynthesisError> {
    if count == 0 {
        return Err(SynthesisError::ZeroCount);
    }
    template.validate()?;
    let bad = template
        .bad_examples
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. VR: {}\n   FR: {}\n   Reason for bad: {}", i + 1, e.vr, e.fr, e.reason))
        .collect::<Vec<_>>()
        .join("\n");
    let values = BTreeMap::from([
        ("instruction", template.instruction.clone()),
        ("good_vr", template.good_example.vr.clone()),
        ("good_fr", template.good_example.fr.clone()),
        ("good_reason", template.good_example.reason.clone()),
        ("bad_examples", bad),
        ("target_vr", vr.composed_text.clone()),
        ("count", count.to_string()),
    ]);
    Ok(SynthesisPrompt {
        template_id: template.template_id.clone(),
        vr_id: vr.id.clone(),
        target_vr: vr.composed_text.clone(),
        requested_count: count,
        text: render(&template.template_id, &template.layout, &values)?,
    })
}

fn strip_marker(line: &str) -> Option<&str> {
    let l = line.trim_start();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = l.strip_prefix(bullet) {
            return Some(rest);
        }
    }
    let digits = l.len() - l.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &l[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if r.starts_with(char::is_whitespace) {
                return Some(r);
            }
        }
    }
    None
}

/// Parse a list response. Accepts "1." / "1)" numbering, "-" / "*" / "•"
/// bullets, or one item per line. When any line carries a marker, unmarked
/// lines (preambles, trailers) are ignored. A single unmarked line counts as a
/// list only when exactly one item was requested.
pub fn parse_list_response(raw: &str, requested: usize) -> Option<Vec<String>> {
    let lines: Vec<&str> = raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let marked: Vec<String> = lines
        .iter()
        .filter_map(|l| strip_marker(l))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if !marked.is_empty() {
        return Some(marked);
    }
    match lines.len() {
        0 => None,
        1 if requested != 1 => None,
        _ => Some(lines.iter().map(|s| s.to_string()).collect()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub fr_text: String,
    pub vr_id: VrId,
    pub provenance: Provenance,
    pub batch_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    pub pairs: Vec<CandidatePair>,
    pub shortfall: usize,
}

fn pairs_from_response(
    prompt: &SynthesisPrompt,
    raw: &str,
    batch_id: &str,
) -> Result<SynthesisOutput, SynthesisError> {
    let mut items = parse_list_response(raw, prompt.requested_count).ok_or_else(|| SynthesisError::Parse {
        vr_id: prompt.vr_id.to_string(),
        raw: raw.to_string(),
    })?;
    let shortfall = prompt.requested_count.saturating_sub(items.len());
    if shortfall > 0 {
        warn!(vr = %prompt.vr_id, got = items.len(), requested = prompt.requested_count, "synthesis shortfall");
    }
    if items.len() > prompt.requested_count {
        warn!(vr = %prompt.vr_id, got = items.len(), "surplus synthesized items truncated");
        items.truncate(prompt.requested_count);
    }
    Ok(SynthesisOutput {
        pairs: items
            .into_iter()
            .map(|fr_text| CandidatePair {
                fr_text,
                vr_id: prompt.vr_id.clone(),
                provenance: Provenance::Synthetic,
                batch_id: batch_id.to_string(),
            })
            .collect(),
        shortfall,
    })
}

pub fn synthesize_frs(
    vr: &VrRecord,
    count: usize,
    template: &SynthesisTemplate,
    gateway: &dyn ChatBackend,
    model_id: &str,
    batch_id: &str,
) -> Result<SynthesisOutput, SynthesisError> {
    let prompt = build_synthesis_prompt(vr, template, count)?;
    let resp = gateway
        .chat(&prompt.to_request(model_id))
        .map_err(|source| SynthesisError::Gateway {
            vr_id: vr.id.to_string(),
            source,
        })?;
    pairs_from_response(&prompt, &resp.content, batch_id)
}

#[derive(Debug)]
pub struct SynthesisRun {
    /// Ordered by (vr_id, item index).
    pub pairs: Vec<CandidatePair>,
    pub shortfall: usize,
    pub failures: Vec<SynthesisError>,
}

/// Synthesize `count` FRs for every VR in the corpus. Per-VR failures are
/// collected rather than aborting the run.
pub fn synthesize_corpus(
    corpus: &VrCorpus,
    count: usize,
    template: &SynthesisTemplate,
    gateway: &dyn ChatBackend,
    model_id: &str,
    batch_id: &str,
    max_in_flight: usize,
) -> Result<SynthesisRun, SynthesisError> {
    let mut records: Vec<&VrRecord> = corpus.records.iter().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let prompts = records
        .iter()
        .map(|r| build_synthesis_prompt(r, template, count))
        .collect::<Result<Vec<_>, _>>()?;
    let requests: Vec<ChatRequest> = prompts.iter().map(|p| p.to_request(model_id)).collect();
    let responses = chat_all(gateway, &requests, max_in_flight);
    let mut run = SynthesisRun {
        pairs: Vec::new(),
        shortfall: 0,
        failures: Vec::new(),
    };
    for (prompt, resp) in prompts.iter().zip(responses) {
        let out = resp
            .map_err(|source| SynthesisError::Gateway {
                vr_id: prompt.vr_id.to_string(),
                source,
            })
            .and_then(|r| pairs_from_response(prompt, &r.content, batch_id));
        match out {
            Ok(o) => {
                run.shortfall += o.shortfall;
                run.pairs.extend(o.pairs);
            }
            Err(e) => {
                warn!(error = %e, "synthesis failed for VR");
                run.failures.push(e);
            }
        }
    }
    Ok(run)
}

/// `ceil(fraction * n)`, tolerant of binary rounding in the product.
pub fn threshold_rank(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub pair_index: usize,
    pub rank: Option<usize>,
    pub threshold_rank: usize,
    pub accepted: bool,
    pub reason: Option<String>,
}

/// Rank every pair's VR among all VRs for the pair's FR under the zero-shot
/// index and accept it when the rank is within the top `fraction`.
pub fn rank_filter(
    pairs: &[CandidatePair],
    zero_shot_index: &VrIndex,
    fraction: f64,
) -> Result<Vec<FilterDecision>, SynthesisError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SynthesisError::Fraction(fraction));
    }
    let threshold = threshold_rank(zero_shot_index.len(), fraction);
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| match zero_shot_index.rank_of(&p.fr_text, &p.vr_id) {
            Ok(rank) => Ok(FilterDecision {
                pair_index: i,
                rank: Some(rank),
                threshold_rank: threshold,
                accepted: rank <= threshold,
                reason: None,
            }),
            Err(RetrieverError::EmptyQuery) => Ok(FilterDecision {
                pair_index: i,
                rank: None,
                threshold_rank: threshold,
                accepted: false,
                reason: Some("FR has no tokens".into()),
            }),
            Err(e) => Err(e.into()),
        })
        .collect()
}

/// A candidate pair together with its filter outcome, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredPair {
    pub fr_text: String,
    pub vr_id: VrId,
    pub provenance: Provenance,
    pub batch_id: String,
    pub accepted: bool,
    pub rank: Option<usize>,
    pub threshold_rank: usize,
}

pub fn filtered_pairs(pairs: &[CandidatePair], decisions: &[FilterDecision]) -> Vec<FilteredPair> {
    decisions
        .iter()
        .map(|d| {
            let p = &pairs[d.pair_index];
            FilteredPair {
                fr_text: p.fr_text.clone(),
                vr_id: p.vr_id.clone(),
                provenance: p.provenance,
                batch_id: p.batch_id.clone(),
                accepted: d.accepted,
                rank: d.rank,
                threshold_rank: d.threshold_rank,
            }
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(s: &str) -> Result<Vec<T>, SynthesisError> {
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SynthesisError::PairFile {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Seeded shuffle, then the last `floor(val * total)` items form the
/// validation set.
pub fn split_train_val<T: Clone>(
    pairs: &[T],
    ratio: (f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), SynthesisError> {
    let (train, val) = ratio;
    if !(train > 0.0 && val > 0.0 && ((train + val) - 1.0).abs() < 1e-9) {
        return Err(SynthesisError::Ratio(train, val));
    }
    if pairs.len() < 10 {
        return Err(SynthesisError::TooFewPairs(pairs.len()));
    }
    let n_val = (val * pairs.len() as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (t, v) = order.split_at(pairs.len() - n_val);
    Ok((
        t.iter().map(|&i| pairs[i].clone()).collect(),
        v.iter().map(|&i| pairs[i].clone()).collect(),
    ))
}
