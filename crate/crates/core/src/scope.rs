//! Keyword-based out-of-scope detection for generated requirements.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::tokenize;

pub const DEFAULT_KEYWORDS: &str = include_str!("../data/keywords.json");

#[derive(Debug, Error, PartialEq)]
pub enum ScopeError {
    #[error("keyword config does not parse: {0}")]
    Parse(String),
    #[error("project {project}: {message}")]
    InvalidKeywords { project: String, message: String },
    #[error("unknown target project {0}")]
    UnknownProject(String),
    #[error("no project other than {0} is configured")]
    NoForeignProjects(String),
}

/// Project id to its keywords, as in `{"ePurse": ["epurse", "pos", ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordConfig {
    pub projects: BTreeMap<String, Vec<String>>,
}

impl KeywordConfig {
    pub fn from_json(s: &str) -> Result<Self, ScopeError> {
        let c: KeywordConfig = serde_json::from_str(s).map_err(|e| ScopeError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn default_config() -> Self {
        Self::from_json(DEFAULT_KEYWORDS).expect("bundled keyword config")
    }

    pub fn validate(&self) -> Result<(), ScopeError> {
        for (project, kws) in &self.projects {
            let bad = |message: &str| ScopeError::InvalidKeywords {
                project: project.clone(),
                message: message.to_string(),
            };
            if kws.is_empty() {
                return Err(bad("no keywords"));
            }
            let mut seen = BTreeSet::new();
            for k in kws {
                if k.trim().is_empty() {
                    return Err(bad("empty keyword"));
                }
                if *k != k.to_lowercase() {
                    return Err(bad(&format!("keyword {k:?} is not lowercase")));
                }
                if !seen.insert(k) {
                    return Err(bad(&format!("duplicate keyword {k:?}")));
                }
            }
        }
        Ok(())
    }

    /// Case-insensitive lookup of a configured project id.
    pub fn resolve(&self, project: &str) -> Option<&str> {
        self.projects
            .keys()
            .find(|k| k.eq_ignore_ascii_case(project))
            .map(String::as_str)
    }

    pub fn without(&self, project: &str) -> Self {
        let mut c = self.clone();
        c.projects.remove(project);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeDecision {
    pub index: usize,
    pub in_scope: bool,
    pub matched_keyword: Option<String>,
    pub matched_foreign_project: Option<String>,
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Mark each SR out of scope when it contains a keyword of any project other
/// than `target`. Matching is on whole tokens of the shared tokenizer, so it
/// is case-insensitive and respects word boundaries.
pub fn filter_out_of_scope<S: AsRef<str>>(
    srs: &[S],
    target: &str,
    config: &KeywordConfig,
) -> Result<Vec<ScopeDecision>, ScopeError> {
    let target = config
        .resolve(target)
        .ok_or_else(|| ScopeError::UnknownProject(target.to_string()))?;
    let foreign: Vec<(&str, Vec<(&str, Vec<String>)>)> = config
        .projects
        .iter()
        .filter(|(p, _)| p.as_str() != target)
        .map(|(p, kws)| {
            (
                p.as_str(),
                kws.iter().map(|k| (k.as_str(), tokenize(k).tokens)).collect(),
            )
        })
        .collect();
    if foreign.is_empty() {
        return Err(ScopeError::NoForeignProjects(target.to_string()));
    }
    Ok(srs
        .iter()
        .enumerate()
        .map(|(index, sr)| {
            let tokens = tokenize(sr.as_ref()).tokens;
            let hit = foreign.iter().find_map(|(p, kws)| {
                kws.iter()
                    .find(|(_, phrase)| contains_phrase(&tokens, phrase))
                    .map(|(k, _)| (k.to_string(), p.to_string()))
            });
            ScopeDecision {
                index,
                in_scope: hit.is_none(),
                matched_keyword: hit.as_ref().map(|h| h.0.clone()),
                matched_foreign_project: hit.map(|h| h.1),
            }
        })
        .collect())
}

/// Capitalized words that are not sentence-initial and whose lowercase form
/// is absent from `known_vocabulary`. Advisory only.
pub fn proper_noun_review_flags<S: AsRef<str>>(srs: &[S], known_vocabulary: &BTreeSet<String>) -> Vec<Vec<String>> {
    srs.iter()
        .map(|sr| {
            let mut flags = Vec::new();
            let mut sentence_start = true;
            for raw in sr.as_ref().split_whitespace() {
                let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
                let initial = sentence_start;
                sentence_start = raw.ends_with(['.', '!', '?', ':']);
                if word.is_empty() || initial {
                    continue;
                }
                if word.chars().next().is_some_and(char::is_uppercase)
                    && !known_vocabulary.contains(&word.to_lowercase())
                    && !flags.iter().any(|f| f == word)
                {
                    flags.push(word.to_string());
                }
            }
            flags
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const PSAM_SR: &str = "offline authentication must be conducted between the PSAM and card at any point during transactions by the load acquirer";

    #[test]
    fn psam_example() {
        let c = KeywordConfig::default_config();
        let d = filter_out_of_scope(&[PSAM_SR], "GPS", &c).unwrap();
        assert!(!d[0].in_scope);
        assert_eq!(d[0].matched_keyword.as_deref(), Some("psam"));
        assert_eq!(d[0].matched_foreign_project.as_deref(), Some("ePurse"));
        let d = filter_out_of_scope(&[PSAM_SR], "ePurse", &c).unwrap();
        assert!(d[0].in_scope);
        let d = filter_out_of_scope(&["The applet shall log every install."], "GPS", &c).unwrap();
        assert!(d[0].in_scope);
    }

    #[test]
    fn word_boundaries() {
        let c = KeywordConfig::default_config();
        let d = filter_out_of_scope(&["The CPN node", "opcpnx relay", "cpn-gateway"], "GPS", &c).unwrap();
        assert_eq!(d.iter().map(|x| x.in_scope).collect::<Vec<_>>(), [false, true, false]);
        // "pos" must not match "position".
        assert!(filter_out_of_scope(&["update the position"], "GPS", &c).unwrap()[0].in_scope);
    }

    #[test]
    fn config_errors() {
        let c = KeywordConfig::default_config();
        assert_eq!(
            filter_out_of_scope(&["x"], "Nope", &c),
            Err(ScopeError::UnknownProject("Nope".into()))
        );
        let single = KeywordConfig::from_json(r#"{"GPS":["gps"]}"#).unwrap();
        assert!(matches!(filter_out_of_scope(&["x"], "GPS", &single), Err(ScopeError::NoForeignProjects(_))));
        assert!(KeywordConfig::from_json(r#"{"A":["Upper"]}"#).is_err());
        assert!(KeywordConfig::from_json(r#"{"A":["a","a"]}"#).is_err());
        assert!(KeywordConfig::from_json(r#"{"A":[]}"#).is_err());
    }

    #[test]
    fn default_keywords_match_table() {
        let c = KeywordConfig::default_config();
        assert_eq!(c.projects["ePurse"], ["epurse", "pos", "psam", "ceps", "cep"]);
        assert_eq!(c.projects["CPN"], ["cpn", "cng"]);
        assert_eq!(c.projects["GPS"], ["gps", "globalplatform"]);
    }

    #[test]
    fn review_flags() {
        let vocab: BTreeSet<String> = ["the", "model", "uses"].iter().map(|s| s.to_string()).collect();
        let flags = proper_noun_review_flags(
            &["The system uses the Objectiver model.", "Objectiver is first.", "all lowercase here"],
            &vocab,
        );
        assert_eq!(flags[0], ["Objectiver"]);
        assert!(flags[1].is_empty());
        assert!(flags[2].is_empty());
    }
}
