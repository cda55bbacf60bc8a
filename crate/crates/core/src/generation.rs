//! Gated SR generation over retrieved FR-VR pairs, and near-duplicate
//! consolidation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::corpus::{FrRecord, FrSet, VrCorpus, VrId, VrRecord};
use crate::llm::{bounded_map, ChatBackend, ChatMessage, ChatRequest, GatewayError};
use crate::prompt::{render, require_slots, TemplateError};
use crate::retriever::{RetrieverError, VrIndex};
use crate::text::tokenize;

pub const DEFAULT_GENERATION_TEMPLATE: &str = include_str!("../data/prompts/generation.json");
pub const DEFAULT_SENTINEL: &str = "NOT_APPLICABLE";
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("empty response for ({fr_id}, {vr_id})")]
    EmptyResponse { fr_id: String, vr_id: String },
    #[error("gateway failure for ({fr_id}, {vr_id}): {source}")]
    Gateway {
        fr_id: String,
        vr_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error("VR {0} is not in the corpus")]
    UnknownVr(String),
    #[error("SR file line {line}: {message}")]
    SrFile { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarKind {
    Relevant,
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationExemplar {
    pub kind: ExemplarKind,
    pub fr: String,
    pub vr: String,
    /// The SR for a relevant exemplar. Irrelevant exemplars answer with the
    /// sentinel, filled in at render time.
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTemplate {
    pub template_id: String,
    pub sentinel: String,
    pub instruction: String,
    pub examples: Vec<GenerationExemplar>,
    pub layout: String,
}

impl GenerationTemplate {
    pub fn from_json(s: &str) -> Result<Self, TemplateError> {
        let t: GenerationTemplate = serde_json::from_str(s).map_err(|e| TemplateError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn default_template() -> Self {
        Self::from_json(DEFAULT_GENERATION_TEMPLATE).expect("bundled generation template")
    }

    pub fn with_sentinel(mut self, sentinel: &str) -> Self {
        self.sentinel = sentinel.to_string();
        self
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let invalid = |message: String| TemplateError::Invalid {
            template: self.template_id.clone(),
            message,
        };
        let relevant = self.examples.iter().filter(|e| e.kind == ExemplarKind::Relevant).count();
        let irrelevant = self.examples.len() - relevant;
        if (relevant, irrelevant) != (1, 1) {
            return Err(invalid(format!(
                "expected one relevant and one irrelevant example, found {relevant} and {irrelevant}"
            )));
        }
        for e in &self.examples {
            if e.fr.trim().is_empty() || e.vr.trim().is_empty() {
                return Err(invalid("example with empty FR or VR".into()));
            }
            if e.kind == ExemplarKind::Relevant && e.output.as_deref().is_none_or(|o| o.trim().is_empty()) {
                return Err(invalid("relevant example has no SR".into()));
            }
        }
        if self.sentinel.trim().is_empty() || self.sentinel.contains('\n') {
            return Err(invalid("sentinel must be a single non-empty line".into()));
        }
        require_slots(&self.template_id, &self.instruction, &["sentinel"])?;
        require_slots(&self.template_id, &self.layout, &["instruction", "examples", "target_fr", "target_vr"])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub template_id: String,
    pub fr_id: String,
    pub vr_id: VrId,
    pub text: String,
}

impl GenerationPrompt {
    pub fn to_request(&self, model_id: &str) -> ChatRequest {
        ChatRequest::new(model_id, vec![ChatMessage::user(self.text.clone())])
    }
}

pub fn build_generation_prompt(
    fr: &FrRecord,
    vr: &VrRecord,
    template: &GenerationTemplate,
) -> Result<GenerationPrompt, GenerationError> {
    template.validate()?;
    let sentinel = BTreeMap::from([("sentinel", template.sentinel.clone())]);
    let instruction = render(&template.template_id, &template.instruction, &sentinel)?;
    let examples = template
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let answer = match e.kind {
                ExemplarKind::Relevant => e.output.clone().unwrap_or_default(),
                ExemplarKind::Irrelevant => template.sentinel.clone(),
            };
            format!("Example {}\nFR: {}\nVR: {}\nAnswer: {}", i + 1, e.fr, e.vr, answer)
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let values = BTreeMap::from([
        ("instruction", instruction),
        ("examples", examples),
        ("target_fr", fr.text.clone()),
        ("target_vr", vr.composed_text.clone()),
    ]);
    Ok(GenerationPrompt {
        template_id: template.template_id.clone(),
        fr_id: fr.id.clone(),
        vr_id: vr.id.clone(),
        text: render(&template.template_id, &template.layout, &values)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrRecord {
    pub project: String,
    pub fr_id: String,
    pub vr_id: VrId,
    /// 1-based retrieval rank of the VR for this FR.
    pub rank: usize,
    pub gated: bool,
    /// Empty exactly when gated.
    pub text: String,
    pub raw_response: String,
}

/// Interpret a model response: the sentinel (after trimming, case-sensitive)
/// gates the pair, anything else non-empty is the SR.
pub fn interpret_response(
    fr: &FrRecord,
    vr_id: &VrId,
    rank: usize,
    raw: &str,
    sentinel: &str,
) -> Result<SrRecord, GenerationError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(GenerationError::EmptyResponse {
            fr_id: fr.id.clone(),
            vr_id: vr_id.to_string(),
        });
    }
    let gated = trimmed == sentinel;
    Ok(SrRecord {
        project: fr.project.clone(),
        fr_id: fr.id.clone(),
        vr_id: vr_id.clone(),
        rank,
        gated,
        text: if gated { String::new() } else { trimmed.to_string() },
        raw_response: raw.to_string(),
    })
}

pub fn generate_sr(
    fr: &FrRecord,
    vr: &VrRecord,
    template: &GenerationTemplate,
    gateway: &dyn ChatBackend,
    model_id: &str,
) -> Result<SrRecord, GenerationError> {
    let prompt = build_generation_prompt(fr, vr, template)?;
    let resp = gateway
        .chat(&prompt.to_request(model_id))
        .map_err(|source| GenerationError::Gateway {
            fr_id: fr.id.clone(),
            vr_id: vr.id.to_string(),
            source,
        })?;
    interpret_response(fr, &vr.id, 1, &resp.content, &template.sentinel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub fr_id: String,
    pub vr_id: VrId,
    pub rank: usize,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrManifest {
    pub project: String,
    pub model_id: String,
    pub backend_id: String,
    pub seed: Option<u64>,
    pub template_id: String,
    pub sentinel: String,
    pub k: usize,
    pub provider_id: String,
    pub corpus_hash: String,
    pub table_version: u64,
    pub attempted: usize,
    pub generated: usize,
    pub gated: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrSet {
    pub project: String,
    /// Ordered by (FR position, rank).
    pub records: Vec<SrRecord>,
    pub failures: Vec<FailureEntry>,
    pub manifest: SrManifest,
}

impl SrSet {
    pub fn generated(&self) -> impl Iterator<Item = &SrRecord> {
        self.records.iter().filter(|r| !r.gated)
    }

    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            project: &'a str,
            fr_id: &'a str,
            vr_id: &'a VrId,
            rank: usize,
            gated: bool,
            text: &'a str,
            raw_response: &'a str,
        }
        let mut out = String::new();
        for r in &self.records {
            let line = Line {
                project: &r.project,
                fr_id: &r.fr_id,
                vr_id: &r.vr_id,
                rank: r.rank,
                gated: r.gated,
                text: &r.text,
                raw_response: &r.raw_response,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn records_from_jsonl(s: &str) -> Result<Vec<SrRecord>, GenerationError> {
        s.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| GenerationError::SrFile {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DeriveOptions {
    pub k: usize,
    pub model_id: String,
    pub seed: Option<u64>,
    pub max_in_flight: usize,
    /// Extra attempts per pair for retryable gateway errors, on top of the
    /// gateway's own transport retries.
    pub pair_retries: u32,
}

impl Default for DeriveOptions {
    fn default() -> Self {
        DeriveOptions {
            k: 5,
            model_id: String::new(),
            seed: Some(0),
            max_in_flight: 4,
            pair_retries: 1,
        }
    }
}

/// Retrieve the top-k VRs for every FR and attempt one SR per pair.
/// Individual pair failures land in the failure ledger; the run completes.
pub fn derive_srs(
    frs: &FrSet,
    index: &VrIndex,
    corpus: &VrCorpus,
    template: &GenerationTemplate,
    gateway: &dyn ChatBackend,
    opts: &DeriveOptions,
) -> Result<SrSet, GenerationError> {
    if opts.k == 0 {
        return Err(GenerationError::ZeroK);
    }
    template.validate()?;
    let mut work = Vec::with_capacity(frs.len() * opts.k);
    for fr in &frs.records {
        for hit in index.retrieve_top_k(&fr.text, opts.k)? {
            let vr = corpus
                .get(&hit.vr_id)
                .ok_or_else(|| GenerationError::UnknownVr(hit.vr_id.to_string()))?;
            let mut req = build_generation_prompt(fr, vr, template)?.to_request(&opts.model_id);
            req.seed = opts.seed;
            work.push((fr, hit.vr_id, hit.rank, req));
        }
    }
    let workers = if gateway.deterministic() { 1 } else { opts.max_in_flight };
    let outcomes = bounded_map(&work, workers, |(fr, vr_id, rank, req)| {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let res = gateway
                .chat(req)
                .map_err(|source| GenerationError::Gateway {
                    fr_id: fr.id.clone(),
                    vr_id: vr_id.to_string(),
                    source,
                })
                .and_then(|r| interpret_response(fr, vr_id, *rank, &r.content, &template.sentinel));
            match res {
                Err(GenerationError::Gateway { ref source, .. })
                    if source.is_retryable() && attempts <= opts.pair_retries => {}
                other => return (attempts, other),
            }
        }
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((fr, vr_id, rank, _), (attempts, out)) in work.iter().zip(outcomes) {
        match out {
            Ok(r) => records.push(r),
            Err(e) => {
                warn!(fr = %fr.id, vr = %vr_id, error = %e, "SR generation failed");
                failures.push(FailureEntry {
                    fr_id: fr.id.clone(),
                    vr_id: vr_id.clone(),
                    rank: *rank,
                    attempts,
                    error: e.to_string(),
                });
            }
        }
    }
    let gated = records.iter().filter(|r| r.gated).count();
    let manifest = SrManifest {
        project: frs.project.clone(),
        model_id: opts.model_id.clone(),
        backend_id: gateway.backend_id(),
        seed: opts.seed,
        template_id: template.template_id.clone(),
        sentinel: template.sentinel.clone(),
        k: opts.k,
        provider_id: index.manifest().provider_id.clone(),
        corpus_hash: index.manifest().corpus_hash.clone(),
        table_version: index.manifest().table_version,
        attempted: work.len(),
        generated: records.len() - gated,
        gated,
        failed: failures.len(),
    };
    Ok(SrSet {
        project: frs.project.clone(),
        records,
        failures,
        manifest,
    })
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).tokens.into_iter().collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub representative: (String, VrId),
    /// Includes the representative, in (fr_id, vr_id) order.
    pub members: Vec<(String, VrId)>,
    /// Smallest Jaccard similarity of a member to the representative.
    pub min_similarity: f64,
}

/// Greedy grouping of non-gated SRs. Records are visited in (fr_id, vr_id)
/// order; each unassigned record becomes a representative and absorbs every
/// later unassigned record within `threshold` Jaccard of it. Only groups with
/// at least two members are reported.
pub fn consolidate_duplicates(records: &[SrRecord], threshold: f64) -> Vec<DuplicateGroup> {
    let mut items: Vec<(&SrRecord, BTreeSet<String>)> = records
        .iter()
        .filter(|r| !r.gated)
        .map(|r| (r, token_set(&r.text)))
        .collect();
    items.sort_by(|a, b| (&a.0.fr_id, &a.0.vr_id).cmp(&(&b.0.fr_id, &b.0.vr_id)));
    let mut assigned = vec![false; items.len()];
    let mut groups = Vec::new();
    for i in 0..items.len() {
        if assigned[i] {
            continue;
        }
        assigned[i] = true;
        let key = |r: &SrRecord| (r.fr_id.clone(), r.vr_id.clone());
        let mut members = vec![key(items[i].0)];
        let mut min_similarity = 1.0f64;
        for j in i + 1..items.len() {
            if assigned[j] {
                continue;
            }
            let s = jaccard(&items[i].1, &items[j].1);
            if s >= threshold {
                assigned[j] = true;
                members.push(key(items[j].0));
                min_similarity = min_similarity.min(s);
            }
        }
        if members.len() > 1 {
            groups.push(DuplicateGroup {
                representative: members[0].clone(),
                members,
                min_similarity,
            });
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatResponse, EchoMock};

    fn fr() -> FrRecord {
        FrRecord {
            project: "ePurse".into(),
            id: "ePurse-1".into(),
            text: "The card shall store the purse balance.".into(),
        }
    }

    fn vr() -> VrRecord {
        let c = crate::corpus::ingest_asvs(
            r#"{"Requirements":[{"Name":"Data Protection","Items":[{"Name":"Sensitive Private Data","Items":[
            {"Shortcode":"V8.3.4","Description":"Verify that all sensitive data created and processed by the application has been identified."}]}]}]}"#,
        )
        .unwrap();
        c.records[0].clone()
    }

    struct Fixed(&'static str);
    impl ChatBackend for Fixed {
        fn backend_id(&self) -> String {
            "fixed".into()
        }
        fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            Ok(ChatResponse::stop(self.0))
        }
        fn deterministic(&self) -> bool {
            true
        }
    }

    #[test]
    fn prompt_embeds_texts_and_sentinel() {
        let t = GenerationTemplate::default_template();
        let p = build_generation_prompt(&fr(), &vr(), &t).unwrap();
        assert!(p.text.contains(&fr().text));
        assert!(p.text.contains(&vr().composed_text));
        assert!(p.text.contains("reply with the line NOT_APPLICABLE exactly"));
        let custom = t.with_sentinel("NO_SR");
        assert!(build_generation_prompt(&fr(), &vr(), &custom).unwrap().text.contains("NO_SR"));
    }

    #[test]
    fn template_needs_one_of_each_exemplar() {
        let mut t = GenerationTemplate::default_template();
        t.examples[1].kind = ExemplarKind::Relevant;
        t.examples[1].output = Some("x".into());
        assert!(matches!(t.validate(), Err(TemplateError::Invalid { .. })));
        let mut t = GenerationTemplate::default_template();
        t.examples.pop();
        assert!(t.validate().is_err());
    }

    #[test]
    fn sentinel_gates() {
        let t = GenerationTemplate::default_template();
        let r = generate_sr(&fr(), &vr(), &t, &Fixed("  NOT_APPLICABLE\n"), "m").unwrap();
        assert!(r.gated && r.text.is_empty());
        assert_eq!(r.raw_response, "  NOT_APPLICABLE\n");
        let r = generate_sr(&fr(), &vr(), &t, &Fixed("The card shall encrypt the balance."), "m").unwrap();
        assert!(!r.gated);
        assert_eq!(r.text, "The card shall encrypt the balance.");
        let r = generate_sr(&fr(), &vr(), &t, &Fixed("not_applicable"), "m").unwrap();
        assert!(!r.gated, "sentinel match is case-sensitive");
        assert!(matches!(
            generate_sr(&fr(), &vr(), &t, &Fixed("  "), "m"),
            Err(GenerationError::EmptyResponse { .. })
        ));
        assert!(!generate_sr(&fr(), &vr(), &t, &EchoMock, "m").unwrap().gated);
    }

    fn sr(fr_id: &str, vr: &str, text: &str) -> SrRecord {
        SrRecord {
            project: "p".into(),
            fr_id: fr_id.into(),
            vr_id: vr.parse().unwrap(),
            rank: 1,
            gated: false,
            text: text.into(),
            raw_response: text.into(),
        }
    }

    #[test]
    fn consolidation_examples() {
        let same = [sr("b", "1.1.1", "Lock the account."), sr("a", "2.1.1", "Lock the account.")];
        let g = consolidate_duplicates(&same, 0.8);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members.len(), 2);
        assert_eq!(g[0].representative.0, "a");

        let disjoint = [sr("a", "1.1.1", "alpha beta"), sr("b", "1.1.1", "gamma delta")];
        assert!(consolidate_duplicates(&disjoint, 0.8).is_empty());

        // 8 shared tokens out of a 10-token union.
        let x = sr("a", "1.1.1", "t1 t2 t3 t4 t5 t6 t7 t8 x9");
        let y = sr("b", "1.1.1", "t1 t2 t3 t4 t5 t6 t7 t8 y10");
        assert!((jaccard(&token_set(&x.text), &token_set(&y.text)) - 0.8).abs() < 1e-12);
        assert_eq!(consolidate_duplicates(&[x.clone(), y.clone()], 0.8).len(), 1);
        assert!(consolidate_duplicates(&[x, y], 0.9).is_empty());
    }

    #[test]
    fn consolidation_ignores_gated_and_order() {
        let mut g = sr("c", "1.1.1", "");
        g.gated = true;
        let a = [sr("a", "1.1.1", "same text"), g.clone(), sr("b", "1.1.1", "same text")];
        let b = [sr("b", "1.1.1", "same text"), sr("a", "1.1.1", "same text"), g];
        assert_eq!(consolidate_duplicates(&a, 0.8), consolidate_duplicates(&b, 0.8));
        assert_eq!(consolidate_duplicates(&a, 0.8)[0].members.len(), 2);
    }
}
