use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    /// Natural log.
    pub logprob: f64,
}

/// Autoregressive (or simpler) language model that assigns a probability to
/// each token of a text under its own tokenization.
pub trait LmScorer: Send + Sync {
    fn scorer_id(&self) -> String;
    fn score_tokens(&self, text: &str) -> Result<Vec<TokenLogprob>, GatewayError>;
}

/// Score `text`, checking the scorer's contract: non-empty input, one entry
/// per token, every logprob finite and at most 0, and tokens concatenating
/// back to the input.
pub fn token_logprobs(scorer: &dyn LmScorer, text: &str) -> Result<Vec<TokenLogprob>, GatewayError> {
    if text.is_empty() {
        return Err(GatewayError::InvalidRequest("cannot score empty text".into()));
    }
    let out = scorer.score_tokens(text)?;
    if let Some(t) = out.iter().find(|t| !(t.logprob <= 0.0) || !t.logprob.is_finite()) {
        return Err(GatewayError::Malformed(format!(
            "{}: logprob {} for {:?}",
            scorer.scorer_id(),
            t.logprob,
            t.token
        )));
    }
    let joined: String = out.iter().map(|t| t.token.as_str()).collect();
    if joined != text {
        return Err(GatewayError::Malformed(format!(
            "{}: tokens do not reconstruct the input",
            scorer.scorer_id()
        )));
    }
    Ok(out)
}

/// Split into pieces of leading whitespace plus a non-whitespace run, so the
/// pieces concatenate back to the input. Trailing whitespace joins the last
/// piece.
fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                out.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        if in_word || out.is_empty() {
            out.push(&text[start..]);
        } else {
            let last = out.pop().expect("non-empty");
            out.push(&text[start - last.len()..]);
        }
    }
    out
}

/// Unigram model over whitespace-delimited, lowercased words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnigramScorer {
    pub probs: BTreeMap<String, f64>,
    pub unknown_prob: f64,
}

impl UnigramScorer {
    pub fn uniform<'a>(vocabulary: impl IntoIterator<Item = &'a str>) -> Self {
        let vocab: Vec<&str> = vocabulary.into_iter().collect();
        let p = 1.0 / vocab.len().max(1) as f64;
        UnigramScorer {
            probs: vocab.into_iter().map(|w| (w.to_lowercase(), p)).collect(),
            unknown_prob: p,
        }
    }

    /// Add-k smoothed estimate from training texts, with one extra slot for
    /// unseen words.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, k: f64) -> Self {
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1.0;
            }
        }
        let total: f64 = counts.values().sum::<f64>() + k * (counts.len() as f64 + 1.0);
        UnigramScorer {
            probs: counts.into_iter().map(|(w, c)| (w, (c + k) / total)).collect(),
            unknown_prob: k / total,
        }
    }
}

impl LmScorer for UnigramScorer {
    fn scorer_id(&self) -> String {
        format!("unigram/{}", self.probs.len())
    }

    fn score_tokens(&self, text: &str) -> Result<Vec<TokenLogprob>, GatewayError> {
        Ok(pieces(text)
            .into_iter()
            .map(|p| {
                let key = p.trim().to_lowercase();
                let prob = self.probs.get(&key).copied().unwrap_or(self.unknown_prob);
                TokenLogprob {
                    token: p.to_string(),
                    logprob: prob.ln(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_reconstruct() {
        for s in ["a b c", "  lead", "trail  ", "one", " ", "x\n\ty z "] {
            assert_eq!(pieces(s).concat(), s, "{s:?}");
        }
        assert_eq!(pieces("a b c"), ["a", " b", " c"]);
    }

    #[test]
    fn uniform_four_word_vocabulary() {
        let s = UnigramScorer::uniform(["the", "system", "shall", "log"]);
        let out = token_logprobs(&s, "the system shall").unwrap();
        assert_eq!(out.len(), 3);
        for t in &out {
            assert!((t.logprob - 0.25f64.ln()).abs() < 1e-15);
        }
        assert_eq!(token_logprobs(&s, "log").unwrap().len(), 1);
        assert!(matches!(token_logprobs(&s, ""), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn fitted_probabilities_sum_to_one() {
        let s = UnigramScorer::fit(["a b b", "c"], 1.0);
        let total: f64 = s.probs.values().sum::<f64>() + s.unknown_prob;
        assert!((total - 1.0).abs() < 1e-12);
        assert!(s.probs["b"] > s.probs["a"]);
    }
}
