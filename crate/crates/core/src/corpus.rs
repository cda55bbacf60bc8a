//! ASVS verification requirements and project functional requirements.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::token_count;

/// Joins chapter, section, and description when composing retrieval text.
pub const DEFAULT_SEPARATOR: &str = " - ";

/// Plausibility band for composed VR token counts; outside it we only warn.
pub const VR_TOKEN_BAND: (usize, usize) = (4, 160);
/// FR token counts outside this range are rejected.
pub const FR_TOKEN_RANGE: (usize, usize) = (1, 512);

pub const REASON_DEPRECATED: &str = "deprecated";
pub const REASON_PROCESS: &str = "process-oriented";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed ASVS document at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("duplicate verification requirement id {0}")]
    DuplicateId(String),
    #[error("invalid verification requirement id {0:?}")]
    InvalidId(String),
    #[error("record {0} is deprecated and has no retrieval text")]
    Deprecated(String),
    #[error("FR file line {line}: {message}")]
    FrParse { line: usize, message: String },
    #[error("duplicate FR id {0}")]
    DuplicateFrId(String),
    #[error("FR set for project {0} is empty")]
    EmptyFrSet(String),
    #[error("malformed exclusion config: {0}")]
    ExclusionConfig(String),
}

/// Dotted three-part ASVS ordinal such as `2.1.1`, ordered numerically.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VrId {
    text: String,
    parts: [u32; 3],
}

impl VrId {
    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn chapter(&self) -> u32 {
        self.parts[0]
    }

    /// True when `prefix` ("1.1", "14.1", "1.6.1") names this id or one of its
    /// ancestors. "1.1" does not match "1.10.1".
    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.text == prefix
            || (self.text.starts_with(prefix) && self.text[prefix.len()..].starts_with('.'))
    }
}

impl FromStr for VrId {
    type Err = CorpusError;

    /// Accepts `2.1.1` and the export's `V2.1.1` shortcode form.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let body = trimmed
            .strip_prefix('V')
            .or_else(|| trimmed.strip_prefix('v'))
            .unwrap_or(trimmed);
        let pieces: Vec<&str> = body.split('.').collect();
        if pieces.len() != 3 {
            return Err(CorpusError::InvalidId(s.to_string()));
        }
        let mut parts = [0u32; 3];
        for (slot, piece) in parts.iter_mut().zip(&pieces) {
            if piece.is_empty() || !piece.bytes().all(|b| b.is_ascii_digit()) {
                return Err(CorpusError::InvalidId(s.to_string()));
            }
            *slot = piece
                .parse()
                .map_err(|_| CorpusError::InvalidId(s.to_string()))?;
        }
        Ok(VrId {
            text: format!("{}.{}.{}", parts[0], parts[1], parts[2]),
            parts,
        })
    }
}

impl Ord for VrId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.parts.cmp(&other.parts)
    }
}

impl PartialOrd for VrId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for VrId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for VrId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrRecord {
    pub id: VrId,
    pub chapter_ordinal: u32,
    pub chapter_title: String,
    pub section_title: String,
    pub description: String,
    pub deprecated: bool,
    /// Empty iff deprecated.
    pub composed_text: String,
}

impl VrRecord {
    fn new(
        id: VrId,
        chapter_title: &str,
        section_title: &str,
        description: &str,
    ) -> VrRecord {
        let description = description.trim();
        let deprecated = is_deprecated(description);
        let mut record = VrRecord {
            chapter_ordinal: id.chapter(),
            id,
            chapter_title: chapter_title.trim().to_string(),
            section_title: section_title.trim().to_string(),
            description: description.to_string(),
            deprecated,
            composed_text: String::new(),
        };
        if !deprecated {
            record.composed_text = compose_vr_text(&record, DEFAULT_SEPARATOR)
                .expect("non-deprecated record composes");
        }
        record
    }
}

fn is_deprecated(description: &str) -> bool {
    description.is_empty() || description.starts_with("[DELETED")
}

/// `chapter + sep + section + sep + description`, skipping empty parts so no
/// separator is ever doubled.
pub fn compose_vr_text(record: &VrRecord, separator: &str) -> Result<String, CorpusError> {
    if record.deprecated {
        return Err(CorpusError::Deprecated(record.id.to_string()));
    }
    Ok(join_nonempty(
        &[
            &record.chapter_title,
            &record.section_title,
            &record.description,
        ],
        separator,
    ))
}

fn join_nonempty(parts: &[&str], separator: &str) -> String {
    parts
        .iter()
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(separator)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionEntry {
    pub id: VrId,
    pub reason: String,
    pub record: VrRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrCorpus {
    pub records: Vec<VrRecord>,
    pub exclusion_log: Vec<ExclusionEntry>,
    pub source_version: String,
}

impl VrCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &VrId) -> Option<&VrRecord> {
        self.records.iter().find(|r| &r.id == id)
    }

    pub fn chapter_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.chapter_ordinal).or_insert(0) += 1;
        }
        counts
    }

    pub fn count_excluded(&self, reason: &str) -> usize {
        self.exclusion_log.iter().filter(|e| e.reason == reason).count()
    }

    /// SHA-256 over the version and every in-scope (id, composed_text) pair.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source_version.as_bytes());
        for r in &self.records {
            h.update([0u8]);
            h.update(r.id.as_str().as_bytes());
            h.update([0u8]);
            h.update(r.composed_text.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Nested ASVS export containing every record, including excluded ones,
    /// in id order. Deprecated items keep their original description.
    pub fn to_asvs_export(&self) -> Value {
        let mut all: Vec<&VrRecord> = self
            .records
            .iter()
            .chain(self.exclusion_log.iter().map(|e| &e.record))
            .collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));

        let mut chapters: Vec<Value> = Vec::new();
        for r in all {
            let [c, s, i] = r.id.parts;
            let chapter_code = format!("V{c}");
            if chapters.last().map(|ch| ch["Shortcode"] != chapter_code.as_str()).unwrap_or(true) {
                chapters.push(serde_json::json!({
                    "Shortcode": chapter_code,
                    "Ordinal": c,
                    "Name": r.chapter_title,
                    "Items": [],
                }));
            }
            let chapter = chapters.last_mut().unwrap();
            let sections = chapter["Items"].as_array_mut().unwrap();
            let section_code = format!("V{c}.{s}");
            if sections.last().map(|sec| sec["Shortcode"] != section_code.as_str()).unwrap_or(true) {
                sections.push(serde_json::json!({
                    "Shortcode": section_code,
                    "Ordinal": s,
                    "Name": r.section_title,
                    "Items": [],
                }));
            }
            let section = sections.last_mut().unwrap();
            section["Items"].as_array_mut().unwrap().push(serde_json::json!({
                "Shortcode": format!("V{}", r.id),
                "Ordinal": i,
                "Description": r.description,
            }));
        }
        serde_json::json!({
            "ShortName": "ASVS",
            "Version": self.source_version,
            "Requirements": chapters,
        })
    }
}

fn parse_err(path: impl Into<String>, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        path: path.into(),
        message: message.into(),
    }
}

fn str_field<'a>(v: &'a Value, keys: &[&str], path: &str) -> Result<&'a str, CorpusError> {
    for k in keys {
        if let Some(s) = v.get(*k) {
            return s
                .as_str()
                .ok_or_else(|| parse_err(format!("{path}.{k}"), "expected a string"));
        }
    }
    Err(parse_err(path, format!("missing field {}", keys.join("/"))))
}

fn array_field<'a>(v: &'a Value, key: &str, path: &str) -> Result<&'a Vec<Value>, CorpusError> {
    v.get(key)
        .ok_or_else(|| parse_err(path, format!("missing field {key}")))?
        .as_array()
        .ok_or_else(|| parse_err(format!("{path}.{key}"), "expected an array"))
}

/// Parse an ASVS 4.x JSON export. Both the nested form
/// (`Requirements[] -> Items[] -> Items[]`) and the flat form
/// (`requirements[]` with `req_id`/`req_description`/...) are accepted.
pub fn ingest_asvs(document: &str) -> Result<VrCorpus, CorpusError> {
    let root: Value =
        serde_json::from_str(document).map_err(|e| parse_err("$", e.to_string()))?;
    let version = root
        .get("Version")
        .or_else(|| root.get("version"))
        .and_then(Value::as_str)
        .unwrap_or("unknown")
        .to_string();

    let mut raw = Vec::new();
    if root.get("Requirements").is_some() {
        collect_nested(&root, &mut raw)?;
    } else if root.get("requirements").is_some() {
        collect_flat(&root, &mut raw)?;
    } else {
        return Err(parse_err("$", "expected Requirements (nested) or requirements (flat)"));
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut exclusion_log = Vec::new();
    for record in raw {
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id.to_string()));
        }
        if record.deprecated {
            exclusion_log.push(ExclusionEntry {
                id: record.id.clone(),
                reason: REASON_DEPRECATED.to_string(),
                record,
            });
        } else {
            let n = token_count(&record.composed_text);
            if n < VR_TOKEN_BAND.0 || n > VR_TOKEN_BAND.1 {
                tracing::warn!(id = %record.id, tokens = n, "VR text length outside plausibility band");
            }
            records.push(record);
        }
    }
    Ok(VrCorpus {
        records,
        exclusion_log,
        source_version: version,
    })
}

fn collect_nested(root: &Value, out: &mut Vec<VrRecord>) -> Result<(), CorpusError> {
    let chapters = array_field(root, "Requirements", "$")?;
    for (ci, chapter) in chapters.iter().enumerate() {
        let cpath = format!("$.Requirements[{ci}]");
        let chapter_title = str_field(chapter, &["Name", "name"], &cpath)?;
        let sections = array_field(chapter, "Items", &cpath)?;
        for (si, section) in sections.iter().enumerate() {
            let spath = format!("{cpath}.Items[{si}]");
            let section_title = str_field(section, &["Name", "name"], &spath)?;
            let items = array_field(section, "Items", &spath)?;
            for (ii, item) in items.iter().enumerate() {
                let ipath = format!("{spath}.Items[{ii}]");
                let code = str_field(item, &["Shortcode", "shortcode"], &ipath)?;
                let id: VrId = code
                    .parse()
                    .map_err(|_| parse_err(format!("{ipath}.Shortcode"), format!("bad id {code:?}")))?;
                let description = match item.get("Description") {
                    None | Some(Value::Null) => "",
                    Some(v) => v.as_str().ok_or_else(|| {
                        parse_err(format!("{ipath}.Description"), "expected a string")
                    })?,
                };
                out.push(VrRecord::new(id, chapter_title, section_title, description));
            }
        }
    }
    Ok(())
}

fn collect_flat(root: &Value, out: &mut Vec<VrRecord>) -> Result<(), CorpusError> {
    let rows = array_field(root, "requirements", "$")?;
    for (i, row) in rows.iter().enumerate() {
        let path = format!("$.requirements[{i}]");
        let code = str_field(row, &["req_id"], &path)?;
        let id: VrId = code
            .parse()
            .map_err(|_| parse_err(format!("{path}.req_id"), format!("bad id {code:?}")))?;
        let chapter = str_field(row, &["chapter_name"], &path)?;
        let section = str_field(row, &["section_name"], &path)?;
        let description = str_field(row, &["req_description"], &path)?;
        out.push(VrRecord::new(id, chapter, section, description));
    }
    Ok(())
}

/// Section prefixes removed before retrieval, with an optional note each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionConfig {
    pub exclusions: Vec<ExclusionRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionRule {
    pub prefix: String,
    #[serde(default)]
    pub note: String,
}

impl ExclusionConfig {
    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        serde_json::from_str(s).map_err(|e| CorpusError::ExclusionConfig(e.to_string()))
    }

    pub fn prefixes(&self) -> Vec<String> {
        self.exclusions.iter().map(|r| r.prefix.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExclusionOutcome {
    pub removed: usize,
    /// Prefixes that matched nothing; reported as warnings.
    pub unmatched: Vec<String>,
}

pub fn apply_exclusions(
    corpus: &VrCorpus,
    excluded_sections: &[String],
) -> (VrCorpus, ExclusionOutcome) {
    let mut hits = vec![0usize; excluded_sections.len()];
    let mut kept = Vec::new();
    let mut log = corpus.exclusion_log.clone();
    for record in &corpus.records {
        let matched = excluded_sections
            .iter()
            .position(|p| record.id.has_prefix(p.trim()));
        match matched {
            Some(i) => {
                hits[i] += 1;
                log.push(ExclusionEntry {
                    id: record.id.clone(),
                    reason: REASON_PROCESS.to_string(),
                    record: record.clone(),
                });
            }
            None => kept.push(record.clone()),
        }
    }
    let unmatched: Vec<String> = excluded_sections
        .iter()
        .zip(&hits)
        .filter(|(_, n)| **n == 0)
        .map(|(p, _)| p.clone())
        .collect();
    for p in &unmatched {
        tracing::warn!(prefix = %p, "exclusion prefix matched no records");
    }
    let removed = corpus.records.len() - kept.len();
    (
        VrCorpus {
            records: kept,
            exclusion_log: log,
            source_version: corpus.source_version.clone(),
        },
        ExclusionOutcome { removed, unmatched },
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrRecord {
    pub project: String,
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrSet {
    pub project: String,
    pub records: Vec<FrRecord>,
}

impl FrSet {
    pub fn new(project: &str, records: Vec<FrRecord>) -> Result<FrSet, CorpusError> {
        if records.is_empty() {
            return Err(CorpusError::EmptyFrSet(project.to_string()));
        }
        let mut ids = HashSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateFrId(r.id.clone()));
            }
        }
        Ok(FrSet {
            project: project.to_string(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// JSON-lines in the same shape `ingest_frs` reads.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::json!({"id": r.id, "text": r.text}).to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrRejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Deserialize)]
struct FrLine {
    #[serde(default)]
    id: Option<String>,
    text: Option<String>,
}

/// Read a JSON-lines FR file (`{"id": optional, "text": ...}` per line).
/// Records with blank or over-long text are rejected individually; missing
/// ids become `<project>-<line number>`.
pub fn ingest_frs(content: &str, project: &str) -> Result<(FrSet, Vec<FrRejection>), CorpusError> {
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FrLine = serde_json::from_str(line).map_err(|e| CorpusError::FrParse {
            line: line_no,
            message: e.to_string(),
        })?;
        let text = parsed.text.unwrap_or_default();
        let text = text.trim();
        let n = token_count(text);
        if n < FR_TOKEN_RANGE.0 {
            rejected.push(FrRejection {
                line: line_no,
                reason: "blank text".into(),
            });
            continue;
        }
        if n > FR_TOKEN_RANGE.1 {
            rejected.push(FrRejection {
                line: line_no,
                reason: format!("{n} tokens exceeds {}", FR_TOKEN_RANGE.1),
            });
            continue;
        }
        let id = match parsed.id {
            Some(id) if !id.trim().is_empty() => id.trim().to_string(),
            _ => format!("{project}-{line_no}"),
        };
        records.push(FrRecord {
            project: project.to_string(),
            id,
            text: text.to_string(),
        });
    }
    Ok((FrSet::new(project, records)?, rejected))
}
