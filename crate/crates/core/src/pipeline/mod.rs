//! Configuration, staged persistence and end-to-end runs.
//!
//! A run lives in `<output_dir>/run-<hash>/`, where the hash covers the
//! configuration (minus output location and credentials) and the contents of
//! every input file. Each stage writes into its own subdirectory and finishes
//! by writing `stage.json`, which lists every file it produced with a SHA-256.
//! A stage with a valid `stage.json` is skipped on the next run; a stage
//! directory without one is discarded and rebuilt.

mod config;
mod offline;
mod report;

pub use config::{ChatConfig, FrSource, RunConfig, SampleConfig, ScorerConfig, Seeds};
pub use offline::OfflineResponder;
pub use report::{
    ArtifactRef, EvaluationReport, FailureLedger, ProjectMetrics, ReportBundle, RunManifest, SampleItem,
    SampleReport, StatisticsReport,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::corpus::{apply_exclusions, ingest_asvs, ingest_frs, CorpusError, ExclusionConfig, FrSet, VrCorpus, REASON_DEPRECATED, REASON_PROCESS};
use crate::generation::{consolidate_duplicates, derive_srs, DeriveOptions, GenerationError, GenerationTemplate, SrRecord, SrSet};
use crate::llm::{ChatBackend, GatewayError, LmScorer};
use crate::metrics::{
    self_bleu, self_information, vocabulary_size, min_sample_size, sample_without_replacement, icc_2k, welch_t,
    MetricsError, SampleSizeSpec, ScopedText, DEFAULT_EPSILON, DEFAULT_MAX_N,
};
use crate::prompt::TemplateError;
use crate::retriever::{build_index, load_index_with, save_index, train_weights, RetrieverError, TrainReport, TrainingPair, VrIndex};
use crate::scope::{filter_out_of_scope, proper_noun_review_flags, KeywordConfig, ScopeError};
use crate::synthesis::{
    filtered_pairs, from_jsonl, rank_filter, split_train_val, synthesize_corpus, to_jsonl, CandidatePair, FilteredPair,
    SynthesisError, SynthesisTemplate,
};
use crate::text::{tokenize, EmbeddingProvider};
use crate::weighting::{compute_tf_idf, corpus_vocabulary, init_weight_table, TokenWeightTable, WeightError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl PipelineError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Artifact { .. } => "artifact",
            PipelineError::Corpus(_) => "corpus",
            PipelineError::Weight(_) => "weighting",
            PipelineError::Retriever(_) => "retriever",
            PipelineError::Synthesis(_) => "synthesis",
            PipelineError::Generation(_) => "generation",
            PipelineError::Scope(_) => "scope",
            PipelineError::Metrics(_) => "metrics",
            PipelineError::Gateway(_) => "gateway",
            PipelineError::Template(_) => "template",
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, content: &str) -> Result<(), PipelineError> {
    fs::write(path, content).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    from_jsonl(&read_text(path)?).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    IngestAsvs,
    IngestFrs,
    SynthPairs,
    FilterPairs,
    Split,
    Train,
    BuildIndex,
    Retrieve,
    Generate,
    ScopeFilter,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::IngestAsvs,
        Stage::IngestFrs,
        Stage::SynthPairs,
        Stage::FilterPairs,
        Stage::Split,
        Stage::Train,
        Stage::BuildIndex,
        Stage::Retrieve,
        Stage::Generate,
        Stage::ScopeFilter,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::IngestAsvs => "ingest-asvs",
            Stage::IngestFrs => "ingest-frs",
            Stage::SynthPairs => "synth-pairs",
            Stage::FilterPairs => "filter-pairs",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::BuildIndex => "build-index",
            Stage::Retrieve => "retrieve",
            Stage::Generate => "generate",
            Stage::ScopeFilter => "scope-filter",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn dir_name(self) -> String {
        let pos = Stage::ALL.iter().position(|s| *s == self).expect("listed") + 1;
        format!("{pos:02}-{}", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub run_hash: String,
    pub summary: Value,
    pub outputs: Vec<ArtifactRef>,
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hash files under `run_dir/stage_dir`, paths relative to `run_dir`.
fn artifact_refs(run_dir: &Path, stage_dir: &Path) -> Result<Vec<ArtifactRef>, PipelineError> {
    let mut files = Vec::new();
    list_files(run_dir, stage_dir, &mut files)?;
    files
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != "stage.json"))
        .map(|p| {
            let full = run_dir.join(&p);
            let bytes = fs::read(&full).map_err(io_err(&full))?;
            Ok(ArtifactRef {
                path: rel_string(&p),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// Inputs loaded once per run.
struct Inputs {
    full_corpus: VrCorpus,
    corpus: VrCorpus,
    unmatched_exclusions: Vec<String>,
    frsets: Vec<FrSet>,
    fr_rejections: BTreeMap<String, Vec<crate::corpus::FrRejection>>,
    synthesis_template: SynthesisTemplate,
    generation_template: GenerationTemplate,
    keywords: KeywordConfig,
    provided_weights: Option<TokenWeightTable>,
}

pub struct Pipeline {
    config: RunConfig,
    run_hash: String,
    run_dir: PathBuf,
    inputs: Inputs,
    provider: Arc<dyn EmbeddingProvider>,
    gateway: Box<dyn ChatBackend>,
    scorer: Box<dyn LmScorer>,
    resumed: Vec<Stage>,
    executed: Vec<Stage>,
}

impl Pipeline {
    pub fn open(mut config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        config.fix_seeds();
        let full_corpus = ingest_asvs(&config.asvs_text()?)?;
        let exclusions = ExclusionConfig::from_json(&config.exclusions_text()?)?;
        let (corpus, outcome) = apply_exclusions(&full_corpus, &exclusions.prefixes());
        if corpus.is_empty() {
            return Err(PipelineError::Config("no VRs left after exclusions".into()));
        }
        let mut frsets = Vec::new();
        let mut fr_rejections = BTreeMap::new();
        for src in &config.frs {
            let (set, rejected) = ingest_frs(&config.fr_text(src)?, &src.project)?;
            if !rejected.is_empty() {
                warn!(project = %src.project, count = rejected.len(), "FR records rejected");
            }
            fr_rejections.insert(src.project.clone(), rejected);
            frsets.push(set);
        }
        let synthesis_template = SynthesisTemplate::from_json(&config.synthesis_template_text()?)?;
        let generation_template =
            GenerationTemplate::from_json(&config.generation_template_text()?)?.with_sentinel(&config.sentinel);
        generation_template.validate()?;
        let keywords = KeywordConfig::from_json(&config.keywords_text()?)?;
        let provided_weights = match &config.trained_weights {
            Some(p) => Some(TokenWeightTable::from_json(&read_text(&config.resolve(p))?)?),
            None => None,
        };

        let run_hash = config.run_hash()?;
        let run_dir = config.output_dir.join(format!("run-{}", &run_hash[..16]));
        fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
        let provider = config.embedder.build();
        let gateway = config.build_chat()?;
        let scorer_texts: Vec<String> = corpus
            .records
            .iter()
            .map(|r| r.composed_text.clone())
            .chain(frsets.iter().flat_map(|s| s.records.iter().map(|r| r.text.clone())))
            .collect();
        let scorer = config.build_scorer(&scorer_texts)?;
        info!(run = %run_hash, dir = %run_dir.display(), "run opened");
        Ok(Pipeline {
            inputs: Inputs {
                full_corpus,
                corpus,
                unmatched_exclusions: outcome.unmatched,
                frsets,
                fr_rejections,
                synthesis_template,
                generation_template,
                keywords,
                provided_weights,
            },
            config,
            run_hash,
            run_dir,
            provider,
            gateway,
            scorer,
            resumed: Vec::new(),
            executed: Vec::new(),
        })
    }

    pub fn run_hash(&self) -> &str {
        &self.run_hash
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn corpus(&self) -> &VrCorpus {
        &self.inputs.corpus
    }

    pub fn full_corpus(&self) -> &VrCorpus {
        &self.inputs.full_corpus
    }

    pub fn fr_sets(&self) -> &[FrSet] {
        &self.inputs.frsets
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    /// Stages skipped because a completed record was found.
    pub fn resumed_stages(&self) -> &[Stage] {
        &self.resumed
    }

    pub fn executed_stages(&self) -> &[Stage] {
        &self.executed
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.dir_name())
    }

    /// Whether training is skipped because a trained table was supplied.
    pub fn phase_one_skipped(&self) -> bool {
        self.inputs.provided_weights.is_some()
    }

    /// The verified record of a completed stage, if any.
    pub fn stage_record(&self, stage: Stage) -> Result<Option<StageRecord>, PipelineError> {
        let marker = self.stage_dir(stage).join("stage.json");
        if !marker.exists() {
            return Ok(None);
        }
        let rec: StageRecord = read_json(&marker)?;
        if rec.run_hash != self.run_hash || rec.stage != stage {
            return Err(PipelineError::Artifact {
                path: marker.display().to_string(),
                message: "stage record belongs to a different run".into(),
            });
        }
        let current = artifact_refs(&self.run_dir, &self.stage_dir(stage))?;
        if current != rec.outputs {
            return Err(PipelineError::Artifact {
                path: self.stage_dir(stage).display().to_string(),
                message: "stage outputs changed since the stage completed".into(),
            });
        }
        Ok(Some(rec))
    }

    fn mark_resumed(&mut self, stage: Stage) {
        if !self.resumed.contains(&stage) && !self.executed.contains(&stage) {
            info!(stage = stage.name(), "stage already complete; skipping");
            self.resumed.push(stage);
        }
    }

    /// Run `body` for `stage` unless a completed record exists.
    fn stage<F>(&mut self, stage: Stage, body: F) -> Result<StageRecord, PipelineError>
    where
        F: FnOnce(&mut Self, &Path) -> Result<Value, PipelineError>,
    {
        if let Some(rec) = self.stage_record(stage)? {
            self.mark_resumed(stage);
            return Ok(rec);
        }
        let dir = self.stage_dir(stage);
        if dir.exists() {
            warn!(stage = stage.name(), "discarding incomplete stage output");
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        info!(stage = stage.name(), "running stage");
        let summary = body(self, &dir)?;
        let rec = StageRecord {
            stage,
            run_hash: self.run_hash.clone(),
            summary,
            outputs: artifact_refs(&self.run_dir, &dir)?,
        };
        write_json(&dir.join("stage.json"), &rec)?;
        self.executed.push(stage);
        Ok(rec)
    }

    pub fn ingest_asvs(&mut self) -> Result<StageRecord, PipelineError> {
        self.stage(Stage::IngestAsvs, |p, dir| {
            let full = &p.inputs.full_corpus;
            let corpus = &p.inputs.corpus;
            write_json(&dir.join("corpus.json"), &corpus.to_asvs_export())?;
            let log: Vec<Value> = corpus
                .exclusion_log
                .iter()
                .map(|e| json!({"id": e.id, "reason": e.reason}))
                .collect();
            write_json(&dir.join("exclusion-log.json"), &log)?;
            Ok(json!({
                "source_version": full.source_version,
                "valid": full.len(),
                "deprecated": full.count_excluded(REASON_DEPRECATED),
                "per_chapter": full.chapter_counts(),
                "excluded_process": corpus.count_excluded(REASON_PROCESS),
                "in_scope": corpus.len(),
                "unmatched_exclusions": p.inputs.unmatched_exclusions,
                "corpus_hash": corpus.content_hash(),
            }))
        })
    }

    pub fn ingest_frs(&mut self) -> Result<StageRecord, PipelineError> {
        self.stage(Stage::IngestFrs, |p, dir| {
            let mut counts = BTreeMap::new();
            for set in &p.inputs.frsets {
                write_text(&dir.join(format!("frs-{}.jsonl", set.project)), &set.to_jsonl())?;
                let rejected = &p.inputs.fr_rejections[&set.project];
                write_json(&dir.join(format!("rejected-{}.json", set.project)), rejected)?;
                counts.insert(set.project.clone(), json!({"accepted": set.len(), "rejected": rejected.len()}));
            }
            let total: usize = p.inputs.frsets.iter().map(FrSet::len).sum();
            Ok(json!({"projects": counts, "total": total}))
        })
    }

    pub fn synth_pairs(&mut self) -> Result<Vec<CandidatePair>, PipelineError> {
        self.ingest_asvs()?;
        let rec = self.stage(Stage::SynthPairs, |p, dir| {
            let run = synthesize_corpus(
                &p.inputs.corpus,
                p.config.synth_count,
                &p.inputs.synthesis_template,
                p.gateway.as_ref(),
                &p.config.model_id(),
                &format!("synth-{}", &p.run_hash[..8]),
                p.config.max_in_flight,
            )?;
            write_text(&dir.join("candidates.jsonl"), &to_jsonl(&run.pairs))?;
            let failures: Vec<String> = run.failures.iter().map(ToString::to_string).collect();
            write_json(&dir.join("failures.json"), &failures)?;
            Ok(json!({
                "vrs": p.inputs.corpus.len(),
                "requested_per_vr": p.config.synth_count,
                "candidates": run.pairs.len(),
                "shortfall": run.shortfall,
                "failed_vrs": failures.len(),
            }))
        })?;
        let _ = rec;
        read_jsonl(&self.stage_dir(Stage::SynthPairs).join("candidates.jsonl"))
    }

    fn zero_shot_index(&self) -> Result<VrIndex, PipelineError> {
        let vocab = corpus_vocabulary(&self.inputs.corpus);
        let table = TokenWeightTable::uniform(vocab.iter().map(String::as_str));
        Ok(build_index(&self.inputs.corpus, Arc::clone(&self.provider), table, None)?)
    }

    pub fn filter_pairs(&mut self) -> Result<Vec<FilteredPair>, PipelineError> {
        let candidates = self.synth_pairs()?;
        self.stage(Stage::FilterPairs, |p, dir| {
            let index = p.zero_shot_index()?;
            save_index(&index, &dir.join("zero-shot-index"))?;
            let decisions = rank_filter(&candidates, &index, p.config.filter_fraction)?;
            let filtered = filtered_pairs(&candidates, &decisions);
            write_text(&dir.join("filtered.jsonl"), &to_jsonl(&filtered))?;
            let accepted = filtered.iter().filter(|f| f.accepted).count();
            Ok(json!({
                "candidates": filtered.len(),
                "accepted": accepted,
                "fraction": p.config.filter_fraction,
                "threshold_rank": crate::synthesis::threshold_rank(index.len(), p.config.filter_fraction),
                "index_entries": index.len(),
            }))
        })?;
        read_jsonl(&self.stage_dir(Stage::FilterPairs).join("filtered.jsonl"))
    }

    pub fn split(&mut self) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>), PipelineError> {
        let filtered = self.filter_pairs()?;
        self.stage(Stage::Split, |p, dir| {
            let accepted: Vec<TrainingPair> = filtered
                .iter()
                .filter(|f| f.accepted)
                .map(|f| TrainingPair {
                    fr_text: f.fr_text.clone(),
                    vr_id: f.vr_id.clone(),
                })
                .collect();
            let (train, val) = split_train_val(&accepted, p.config.split, p.config.seeds().split)?;
            write_text(&dir.join("train.jsonl"), &to_jsonl(&train))?;
            write_text(&dir.join("validation.jsonl"), &to_jsonl(&val))?;
            Ok(json!({"accepted": accepted.len(), "train": train.len(), "validation": val.len()}))
        })?;
        let dir = self.stage_dir(Stage::Split);
        Ok((read_jsonl(&dir.join("train.jsonl"))?, read_jsonl(&dir.join("validation.jsonl"))?))
    }

    /// The trained weight table: from the supplied file, a completed train
    /// stage, or by running the synthesis and training stages.
    pub fn train(&mut self) -> Result<TokenWeightTable, PipelineError> {
        if let Some(table) = self.inputs.provided_weights.clone() {
            self.stage(Stage::Train, |_, dir| {
                write_text(&dir.join("weights.json"), &table.to_json())?;
                Ok(json!({"source": "provided", "final_version": table.version}))
            })?;
        } else if self.stage_record(Stage::Train)?.is_none() {
            let (train, val) = self.split()?;
            self.stage(Stage::Train, |p, dir| {
                let tfidf = compute_tf_idf(&p.inputs.corpus)?;
                let (init, init_report) = init_weight_table(&tfidf, p.config.aggregation)?;
                write_text(&dir.join("initial-weights.json"), &init.to_json())?;
                let index = build_index(&p.inputs.corpus, Arc::clone(&p.provider), init, None)?;
                let (table, report): (TokenWeightTable, TrainReport) =
                    train_weights(&index, &train, &val, &p.config.train)?;
                write_text(&dir.join("weights.json"), &table.to_json())?;
                write_json(&dir.join("train-report.json"), &report)?;
                Ok(json!({
                    "source": "trained",
                    "vocabulary": init_report.vocabulary,
                    "clamped_low": init_report.clamped_low,
                    "clamped_high": init_report.clamped_high,
                    "train_pairs": train.len(),
                    "validation_pairs": val.len(),
                    "steps": report.steps,
                    "final_version": table.version,
                }))
            })?;
        } else {
            self.mark_resumed(Stage::Train);
        }
        let rec = self.stage_record(Stage::Train)?.expect("train stage complete");
        let table = TokenWeightTable::from_json(&read_text(&self.stage_dir(Stage::Train).join("weights.json"))?)?;
        if rec.summary["final_version"].as_u64() != Some(table.version) {
            return Err(PipelineError::Artifact {
                path: self.stage_dir(Stage::Train).display().to_string(),
                message: format!(
                    "weight table version {} does not match the recorded {}",
                    table.version, rec.summary["final_version"]
                ),
            });
        }
        Ok(table)
    }

    pub fn build_index(&mut self) -> Result<VrIndex, PipelineError> {
        let table = self.train()?;
        self.stage(Stage::BuildIndex, |p, dir| {
            let index = build_index(&p.inputs.corpus, Arc::clone(&p.provider), table, None)?;
            save_index(&index, &dir.join("index"))?;
            Ok(json!({
                "entries": index.len(),
                "table_version": index.manifest().table_version,
                "provider_id": index.manifest().provider_id,
                "corpus_hash": index.manifest().corpus_hash,
            }))
        })?;
        Ok(load_index_with(
            &self.stage_dir(Stage::BuildIndex).join("index"),
            &self.inputs.corpus,
            Arc::clone(&self.provider),
        )?)
    }

    pub fn retrieve(&mut self) -> Result<StageRecord, PipelineError> {
        let index = self.build_index()?;
        self.stage(Stage::Retrieve, |p, dir| {
            let mut counts = BTreeMap::new();
            for set in &p.inputs.frsets {
                let mut out = String::new();
                let mut pairs = 0;
                for fr in &set.records {
                    let results = index.retrieve_top_k(&fr.text, p.config.k)?;
                    pairs += results.len();
                    out.push_str(&json!({"fr_id": fr.id, "results": results}).to_string());
                    out.push('\n');
                }
                write_text(&dir.join(format!("retrieval-{}.jsonl", set.project)), &out)?;
                counts.insert(set.project.clone(), pairs);
            }
            let total: usize = counts.values().sum();
            Ok(json!({"k": p.config.k, "pairs": counts, "total_pairs": total}))
        })
    }

    pub fn generate(&mut self) -> Result<Vec<SrSet>, PipelineError> {
        let index = self.build_index()?;
        self.retrieve()?;
        self.stage(Stage::Generate, |p, dir| {
            let opts = DeriveOptions {
                k: p.config.k,
                model_id: p.config.model_id(),
                seed: Some(p.config.seeds().chat),
                max_in_flight: p.config.max_in_flight,
                pair_retries: 1,
            };
            let mut summary = BTreeMap::new();
            for set in &p.inputs.frsets {
                let srs = derive_srs(
                    set,
                    &index,
                    &p.inputs.corpus,
                    &p.inputs.generation_template,
                    p.gateway.as_ref(),
                    &opts,
                )?;
                let groups = consolidate_duplicates(&srs.records, p.config.merge_threshold);
                write_json(&dir.join(format!("srs-{}.json", set.project)), &srs)?;
                write_text(&dir.join(format!("srs-{}.jsonl", set.project)), &srs.to_jsonl())?;
                write_json(&dir.join(format!("duplicates-{}.json", set.project)), &groups)?;
                let m = &srs.manifest;
                summary.insert(
                    set.project.clone(),
                    json!({
                        "attempted": m.attempted,
                        "generated": m.generated,
                        "gated": m.gated,
                        "failed": m.failed,
                        "duplicate_groups": groups.len(),
                    }),
                );
            }
            let attempted: u64 = summary.values().map(|v| v["attempted"].as_u64().unwrap_or(0)).sum();
            Ok(json!({"projects": summary, "attempted": attempted}))
        })?;
        let dir = self.stage_dir(Stage::Generate);
        self.inputs
            .frsets
            .iter()
            .map(|s| read_json(&dir.join(format!("srs-{}.json", s.project))))
            .collect()
    }

    pub fn scope_filter(&mut self) -> Result<BTreeMap<String, Vec<ScopedSr>>, PipelineError> {
        let sets = self.generate()?;
        self.stage(Stage::ScopeFilter, |p, dir| {
            let mut known: BTreeSet<String> = corpus_vocabulary(&p.inputs.corpus);
            for s in &p.inputs.frsets {
                for r in &s.records {
                    known.extend(tokenize(&r.text).tokens);
                }
            }
            let mut summary = BTreeMap::new();
            for set in &sets {
                let generated: Vec<&SrRecord> = set.generated().collect();
                let texts: Vec<&str> = generated.iter().map(|r| r.text.as_str()).collect();
                let decisions = filter_out_of_scope(&texts, &set.project, &p.inputs.keywords)?;
                let flags = proper_noun_review_flags(&texts, &known);
                let scoped: Vec<ScopedSr> = generated
                    .iter()
                    .zip(decisions)
                    .zip(flags)
                    .map(|((r, d), f)| ScopedSr {
                        fr_id: r.fr_id.clone(),
                        vr_id: r.vr_id.to_string(),
                        text: r.text.clone(),
                        in_scope: d.in_scope,
                        matched_keyword: d.matched_keyword,
                        matched_foreign_project: d.matched_foreign_project,
                        review_flags: f,
                    })
                    .collect();
                let out_of_scope = scoped.iter().filter(|s| !s.in_scope).count();
                write_text(&dir.join(format!("scope-{}.jsonl", set.project)), &to_jsonl(&scoped))?;
                summary.insert(
                    set.project.clone(),
                    json!({"total": scoped.len(), "removed": out_of_scope, "kept": scoped.len() - out_of_scope}),
                );
            }
            Ok(json!({ "projects": summary }))
        })?;
        let dir = self.stage_dir(Stage::ScopeFilter);
        self.inputs
            .frsets
            .iter()
            .map(|s| Ok((s.project.clone(), read_jsonl(&dir.join(format!("scope-{}.jsonl", s.project)))?)))
            .collect()
    }

    pub fn evaluate(&mut self) -> Result<EvaluationReport, PipelineError> {
        let sets = self.generate()?;
        let scoped = self.scope_filter()?;
        self.stage(Stage::Evaluate, |p, dir| {
            let report = p.compute_evaluation(&sets, &scoped)?;
            write_json(&dir.join("evaluation.json"), &report)?;
            Ok(json!({"projects": report.projects.len(), "sample_size": report.sample.size}))
        })?;
        read_json(&self.stage_dir(Stage::Evaluate).join("evaluation.json"))
    }

    fn compute_evaluation(
        &self,
        sets: &[SrSet],
        scoped: &BTreeMap<String, Vec<ScopedSr>>,
    ) -> Result<EvaluationReport, PipelineError> {
        let seeds = self.config.seeds();
        let mut projects = BTreeMap::new();
        let mut pool: Vec<SampleItem> = Vec::new();
        for set in sets {
            let items = &scoped[&set.project];
            let mut si_total = 0.0;
            for s in items {
                si_total += self_information(&s.text, self.scorer.as_ref(), s.in_scope)?;
            }
            let mut per_fr: BTreeMap<String, Vec<ScopedText>> = BTreeMap::new();
            for s in items {
                per_fr.entry(s.fr_id.clone()).or_default().push(ScopedText {
                    text: s.text.clone(),
                    in_scope: s.in_scope,
                });
            }
            let self_bleu_mean = match self_bleu(&per_fr, seeds.self_bleu, DEFAULT_MAX_N, DEFAULT_EPSILON) {
                Ok(r) => Some(r.mean),
                Err(MetricsError::SampleTooSmall(_)) => None,
                Err(e) => return Err(e.into()),
            };
            let texts: Vec<&str> = items.iter().map(|s| s.text.as_str()).collect();
            let flags: Vec<bool> = items.iter().map(|s| s.in_scope).collect();
            let n_in_scope = flags.iter().filter(|f| **f).count();
            projects.insert(
                set.project.clone(),
                ProjectMetrics {
                    self_information_mean: (!items.is_empty()).then(|| si_total / items.len() as f64),
                    self_bleu_mean,
                    vocabulary_size: vocabulary_size(&texts, &flags),
                    n_in_scope,
                    n_total: items.len(),
                    gated: set.manifest.gated,
                    failed: set.manifest.failed,
                },
            );
            pool.extend(items.iter().map(|s| SampleItem {
                project: set.project.clone(),
                fr_id: s.fr_id.clone(),
                vr_id: s.vr_id.clone(),
            }));
        }
        let sample = if pool.is_empty() {
            SampleReport {
                population: 0,
                size: 0,
                selected: Vec::new(),
            }
        } else {
            let spec = SampleSizeSpec {
                population: Some(pool.len() as u64),
                confidence: self.config.sample.confidence,
                margin: self.config.sample.margin,
                proportion: self.config.sample.proportion,
            };
            let size = min_sample_size(&spec)? as usize;
            SampleReport {
                population: pool.len(),
                size,
                selected: sample_without_replacement(&pool, size, seeds.sample)?,
            }
        };
        let statistics = match &self.config.ratings {
            Some(path) => {
                let r: RatingsFile = read_json(&self.config.resolve(path))?;
                Some(StatisticsReport {
                    icc: r.icc.as_deref().map(icc_2k).transpose()?,
                    welch: r.welch.as_ref().map(|w| welch_t(&w.a, &w.b)).transpose()?,
                })
            }
            None => None,
        };
        Ok(EvaluationReport {
            scorer_id: self.scorer.scorer_id(),
            projects,
            sample,
            statistics,
        })
    }

    fn run_manifest(&self, table_version: u64) -> RunManifest {
        let seeds = self.config.seeds();
        RunManifest {
            run_hash: self.run_hash.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            corpus_version: self.inputs.corpus.source_version.clone(),
            corpus_hash: self.inputs.corpus.content_hash(),
            in_scope_vrs: self.inputs.corpus.len(),
            provider_id: self.provider.provider_id(),
            table_version,
            chat_backend: self.gateway.backend_id(),
            model_id: self.config.model_id(),
            scorer_id: self.scorer.scorer_id(),
            k: self.config.k,
            filter_fraction: self.config.filter_fraction,
            seeds,
            phase_one: if self.phase_one_skipped() { "provided-weights" } else { "trained" }.to_string(),
        }
    }

    /// Run every stage and assemble the report bundle. A failing stage leaves
    /// `failure.json` in the run directory; earlier stages stay usable.
    pub fn end_to_end(&mut self) -> Result<ReportBundle, PipelineError> {
        match self.end_to_end_inner() {
            Ok(b) => Ok(b),
            Err(e) => {
                let _ = write_json(
                    &self.run_dir.join("failure.json"),
                    &json!({"kind": e.kind(), "error": e.to_string()}),
                );
                Err(e)
            }
        }
    }

    fn end_to_end_inner(&mut self) -> Result<ReportBundle, PipelineError> {
        self.ingest_asvs()?;
        self.ingest_frs()?;
        let evaluation = self.evaluate()?;
        let table = self.train()?;
        let manifest = self.run_manifest(table.version);

        let mut ledger = FailureLedger::default();
        let synth_failures = self.stage_dir(Stage::SynthPairs).join("failures.json");
        if synth_failures.exists() {
            ledger.synthesis = read_json(&synth_failures)?;
        }
        for set in self.generate()? {
            ledger.generation.extend(set.failures);
        }

        self.stage(Stage::Report, |p, dir| {
            write_json(&dir.join("manifest.json"), &manifest)?;
            write_json(&dir.join("failures.json"), &ledger)?;
            let mut artifacts = Vec::new();
            for s in [Stage::Generate, Stage::ScopeFilter, Stage::Evaluate] {
                artifacts.extend(artifact_refs(&p.run_dir, &p.stage_dir(s))?);
            }
            let bundle = json!({
                "manifest": manifest,
                "artifacts": artifacts,
                "evaluation": evaluation,
                "failures": ledger,
            });
            write_json(&dir.join("bundle.json"), &bundle)?;
            Ok(json!({"artifacts": artifacts.len()}))
        })?;
        let dir = self.stage_dir(Stage::Report);
        let bundle: Value = read_json(&dir.join("bundle.json"))?;
        let bundle = ReportBundle {
            dir: dir.clone(),
            manifest: serde_json::from_value(bundle["manifest"].clone()).map_err(|e| PipelineError::Artifact {
                path: dir.display().to_string(),
                message: e.to_string(),
            })?,
            artifacts: serde_json::from_value(bundle["artifacts"].clone()).map_err(|e| PipelineError::Artifact {
                path: dir.display().to_string(),
                message: e.to_string(),
            })?,
            evaluation,
            failures: serde_json::from_value(bundle["failures"].clone()).map_err(|e| PipelineError::Artifact {
                path: dir.display().to_string(),
                message: e.to_string(),
            })?,
        };
        bundle.verify(&self.run_dir)?;
        Ok(bundle)
    }
}

/// A generated SR with its scope decision and advisory review flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopedSr {
    pub fr_id: String,
    pub vr_id: String,
    pub text: String,
    pub in_scope: bool,
    pub matched_keyword: Option<String>,
    pub matched_foreign_project: Option<String>,
    pub review_flags: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct WelchInput {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Human-study ratings: an ICC matrix (subjects x raters) and/or two score
/// samples for Welch's test.
#[derive(Debug, Clone, Deserialize)]
struct RatingsFile {
    #[serde(default)]
    icc: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    welch: Option<WelchInput>,
}
