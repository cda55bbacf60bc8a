//! Deterministic stand-in for the chat model, for runs without a hosted
//! endpoint. It understands the bundled synthesis and generation layouts
//! (the `Target VR:` / `Target FR:` lines and the `Write N FR(s)` request)
//! and answers with simple rule-based text.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::llm::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::text::tokenize;

const STOPWORDS: &[&str] = &[
    "a", "all", "an", "and", "any", "are", "as", "at", "be", "been", "by", "can", "do", "does", "each", "every",
    "for", "from", "has", "have", "if", "in", "into", "is", "it", "its", "least", "no", "not", "of", "on", "or",
    "other", "such", "shall", "that", "the", "their", "them", "there", "these", "this", "those", "to", "using",
    "verify", "was", "were", "when", "where", "which", "while", "with", "within", "without",
];

const ACTORS: &[&str] = &[
    "The customer portal",
    "The mobile banking app",
    "The administration console",
    "The payment service",
    "The reporting module",
    "The order management system",
    "The patient records system",
    "The booking website",
    "The file sharing service",
    "The messaging platform",
];

const ACTIONS: &[&str] = &[
    "let users",
    "allow administrators to",
    "provide a function to",
    "offer a page where customers can",
    "enable operators to",
];

fn content_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .tokens
        .into_iter()
        .filter(|t| t.len() > 2 && !STOPWORDS.contains(&t.as_str()) && !t.chars().all(|c| c.is_ascii_digit()))
        .collect()
}

fn pick(seed: &[u8], salt: u64, n: usize) -> usize {
    let mut h = Sha256::new();
    h.update(seed);
    h.update(salt.to_le_bytes());
    let d = h.finalize();
    (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % n as u64) as usize
}

fn line_after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    text.lines()
        .rev()
        .find_map(|l| l.strip_prefix(marker))
        .map(str::trim)
}

/// VR description: the text after the last " - " of a composed VR.
fn vr_description(composed: &str) -> &str {
    composed.rsplit(" - ").next().unwrap_or(composed).trim()
}

fn requested_count(text: &str) -> Option<usize> {
    let line = line_after(text, "Write ")?;
    line.split_whitespace().next()?.parse().ok()
}

/// Rewrite "Verify that the application does X." into "the application does X".
fn clause(description: &str) -> String {
    let d = description.trim().trim_end_matches('.');
    let d = d
        .strip_prefix("Verify that ")
        .or_else(|| d.strip_prefix("Verify "))
        .unwrap_or(d);
    let mut c = d.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

pub struct OfflineResponder {
    sentinel: String,
}

impl OfflineResponder {
    pub fn new(sentinel: &str) -> Self {
        OfflineResponder {
            sentinel: sentinel.to_string(),
        }
    }

    fn synthesize(&self, vr: &str, count: usize) -> String {
        let words: Vec<String> = content_tokens(vr_description(vr)).into_iter().collect();
        let mut lines = Vec::with_capacity(count);
        for i in 0..count {
            let actor = ACTORS[pick(vr.as_bytes(), i as u64, ACTORS.len())];
            let action = ACTIONS[pick(vr.as_bytes(), 100 + i as u64, ACTIONS.len())];
            let take = 3.min(words.len());
            let start = if words.len() > take { pick(vr.as_bytes(), 200 + i as u64, words.len() - take + 1) } else { 0 };
            let topic = words[start..start + take].join(" ");
            lines.push(format!("{}. {actor} shall {action} manage {topic} records.", i + 1));
        }
        lines.join("\n")
    }

    fn generate(&self, fr: &str, vr: &str) -> String {
        let fr_words = content_tokens(fr);
        let vr_words = content_tokens(vr_description(vr));
        if fr_words.is_disjoint(&vr_words) {
            return self.sentinel.clone();
        }
        let subject = fr
            .split(" shall ")
            .next()
            .filter(|s| s.len() < fr.len())
            .unwrap_or("The system");
        format!("{subject} shall ensure that {}.", clause(vr_description(vr)))
    }
}

impl ChatBackend for OfflineResponder {
    fn backend_id(&self) -> String {
        "offline-rules/v1".into()
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let text = request.last_user().unwrap_or_default();
        let vr = line_after(text, "Target VR:");
        let fr = line_after(text, "Target FR:");
        let content = match (fr, vr, requested_count(text)) {
            (Some(fr), Some(vr), _) => self.generate(fr, vr),
            (None, Some(vr), Some(n)) => self.synthesize(vr, n),
            _ => {
                return Err(GatewayError::InvalidRequest(
                    "offline responder does not recognize this prompt layout".into(),
                ))
            }
        };
        Ok(ChatResponse::stop(content))
    }

    fn deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn ask(text: &str) -> Result<String, GatewayError> {
        OfflineResponder::new("NOT_APPLICABLE")
            .chat(&ChatRequest::new("m", vec![ChatMessage::user(text)]))
            .map(|r| r.content)
    }

    #[test]
    fn synthesis_returns_requested_count() {
        let out = ask("...\nTarget VR: Authentication - Password Security - Verify that passwords are at least 12 characters.\nWrite 4 FR(s) for the target VR").unwrap();
        assert_eq!(out.lines().count(), 4);
        assert!(out.starts_with("1. "));
        assert!(out.contains("passwords") || out.contains("characters"));
    }

    #[test]
    fn generation_gates_on_disjoint_vocabulary() {
        let sr = ask("Target FR: The POS terminal shall store the session token.\nTarget VR: Session Management - Session Binding - Verify the application generates a new session token on authentication.\nAnswer:").unwrap();
        assert!(sr.starts_with("The POS terminal shall ensure that the application generates"), "{sr}");
        let gated = ask("Target FR: The report shall be printed in colour.\nTarget VR: Session Management - Session Binding - Verify the application generates a new session token.\nAnswer:").unwrap();
        assert_eq!(gated, "NOT_APPLICABLE");
    }

    #[test]
    fn unknown_layout_is_an_error() {
        assert!(ask("hello").is_err());
    }
}
