use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sha256_hex, PipelineError, Seeds};
use crate::generation::FailureEntry;
use crate::metrics::{IccResult, WelchResult};

/// A file in the run directory, path relative to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMetrics {
    /// Mean self-information in bits over the project's generated SRs;
    /// out-of-scope SRs contribute 0.
    pub self_information_mean: Option<f64>,
    /// `None` when fewer than two FRs have in-scope SRs.
    pub self_bleu_mean: Option<f64>,
    pub vocabulary_size: usize,
    pub n_in_scope: usize,
    pub n_total: usize,
    pub gated: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleItem {
    pub project: String,
    pub fr_id: String,
    pub vr_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub population: usize,
    pub size: usize,
    pub selected: Vec<SampleItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticsReport {
    pub icc: Option<IccResult>,
    pub welch: Option<WelchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scorer_id: String,
    pub projects: BTreeMap<String, ProjectMetrics>,
    /// SRs drawn for human review.
    pub sample: SampleReport,
    pub statistics: Option<StatisticsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_hash: String,
    pub tool_version: String,
    pub corpus_version: String,
    pub corpus_hash: String,
    pub in_scope_vrs: usize,
    pub provider_id: String,
    pub table_version: u64,
    pub chat_backend: String,
    pub model_id: String,
    pub scorer_id: String,
    pub k: usize,
    pub filter_fraction: f64,
    pub seeds: Seeds,
    /// "trained" or "provided-weights".
    pub phase_one: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureLedger {
    /// VRs whose synthesis request failed.
    pub synthesis: Vec<String>,
    /// FR-VR pairs whose generation failed.
    pub generation: Vec<FailureEntry>,
}

impl FailureLedger {
    pub fn is_empty(&self) -> bool {
        self.synthesis.is_empty() && self.generation.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    #[serde(skip)]
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub artifacts: Vec<ArtifactRef>,
    pub evaluation: EvaluationReport,
    pub failures: FailureLedger,
}

impl ReportBundle {
    pub fn bundle_path(&self) -> PathBuf {
        self.dir.join("bundle.json")
    }

    /// Re-hash every referenced artifact under `run_dir`.
    pub fn verify(&self, run_dir: &Path) -> Result<(), PipelineError> {
        for a in &self.artifacts {
            let p = run_dir.join(&a.path);
            let bytes = std::fs::read(&p).map_err(super::io_err(&p))?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(PipelineError::Artifact {
                    path: p.display().to_string(),
                    message: "checksum mismatch".into(),
                });
            }
        }
        Ok(())
    }
}
