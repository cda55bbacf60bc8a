use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{read_text, sha256_hex, OfflineResponder, PipelineError};
use crate::datasets;
use crate::generation::{DEFAULT_GENERATION_TEMPLATE, DEFAULT_MERGE_THRESHOLD, DEFAULT_SENTINEL};
use crate::llm::{ChatBackend, EchoMock, HttpChatClient, HttpConfig, HttpScorer, LmScorer, MockScript, ScriptedMock, UnigramScorer};
use crate::retriever::TrainConfig;
use crate::scope::DEFAULT_KEYWORDS;
use crate::synthesis::DEFAULT_SYNTHESIS_TEMPLATE;
use crate::text::ProviderSpec;
use crate::weighting::Aggregation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrSource {
    pub project: String,
    /// JSONL file; `None` uses the bundled dataset for the project.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub chat: u64,
    pub self_bleu: u64,
    pub sample: u64,
}

impl Seeds {
    fn random() -> Self {
        Seeds {
            split: rand::random(),
            chat: rand::random(),
            self_bleu: rand::random(),
            sample: rand::random(),
        }
    }
}

/// Replace `${NAME}` with the value of environment variable NAME.
fn interpolate_env(s: &str) -> Result<String, PipelineError> {
    let mut out = String::new();
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| PipelineError::Config(format!("unterminated ${{ in {s:?}")))?;
        let name = &rest[start + 2..start + end];
        let value = std::env::var(name)
            .map_err(|_| PipelineError::Config(format!("environment variable {name} not set")))?;
        out.push_str(&value);
        rest = &rest[start + end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatConfig {
    /// Rule-based local responder.
    Offline,
    Echo,
    /// Responses keyed by request fingerprint.
    Scripted { script: PathBuf },
    Http {
        endpoint: String,
        model: String,
        /// May reference environment variables as `${NAME}`.
        #[serde(default, skip_serializing)]
        api_key: Option<String>,
        #[serde(default)]
        requests_per_second: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerConfig {
    /// Add-k unigram model fit on the VR corpus and the FR texts.
    Unigram {
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
    Http {
        endpoint: String,
        model: String,
        #[serde(default, skip_serializing)]
        api_key: Option<String>,
    },
}

fn default_smoothing() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub confidence: f64,
    pub margin: f64,
    pub proportion: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            confidence: 0.95,
            margin: 0.05,
            proportion: 0.5,
        }
    }
}

/// Everything a run depends on. Input paths are optional; absent ones fall
/// back to the bundled data. Relative paths resolve against `base_dir`, which
/// is the config file's directory when loaded with [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub asvs: Option<PathBuf>,
    pub exclusions: Option<PathBuf>,
    pub frs: Vec<FrSource>,
    pub synthesis_template: Option<PathBuf>,
    pub generation_template: Option<PathBuf>,
    pub keywords: Option<PathBuf>,
    pub ratings: Option<PathBuf>,
    /// A trained weight table; when set, synthesis and training are skipped.
    pub trained_weights: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub k: usize,
    pub filter_fraction: f64,
    pub synth_count: usize,
    pub split: (f64, f64),
    pub aggregation: Aggregation,
    pub train: TrainConfig,
    pub embedder: ProviderSpec,
    pub chat: ChatConfig,
    pub scorer: ScorerConfig,
    pub seeds: Option<Seeds>,
    pub deterministic: bool,
    pub sentinel: String,
    pub merge_threshold: f64,
    pub sample: SampleConfig,
    pub max_in_flight: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            asvs: None,
            exclusions: None,
            frs: datasets::PROJECTS
                .iter()
                .map(|p| FrSource {
                    project: p.to_string(),
                    path: None,
                })
                .collect(),
            synthesis_template: None,
            generation_template: None,
            keywords: None,
            ratings: None,
            trained_weights: None,
            output_dir: PathBuf::from("runs"),
            k: 5,
            filter_fraction: 0.3,
            synth_count: 10,
            split: (0.9, 0.1),
            aggregation: Aggregation::Mean,
            train: TrainConfig::default(),
            embedder: ProviderSpec::default(),
            chat: ChatConfig::Offline,
            scorer: ScorerConfig::Unigram {
                smoothing: default_smoothing(),
            },
            seeds: Some(Seeds {
                split: 17,
                chat: 0,
                self_bleu: 7,
                sample: 11,
            }),
            deterministic: true,
            sentinel: DEFAULT_SENTINEL.to_string(),
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            sample: SampleConfig::default(),
            max_in_flight: 4,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut c: RunConfig = serde_json::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut c = Self::from_json(&read_text(path)?, base)?;
        c.output_dir = c.resolve(&c.output_dir.clone());
        Ok(c)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.filter_fraction > 0.0 && self.filter_fraction <= 1.0) {
            return bad(format!("filter_fraction {} not in (0, 1]", self.filter_fraction));
        }
        if self.synth_count == 0 {
            return bad("synth_count must be positive".into());
        }
        if !(self.merge_threshold > 0.0 && self.merge_threshold <= 1.0) {
            return bad(format!("merge_threshold {} not in (0, 1]", self.merge_threshold));
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        if self.sentinel.trim().is_empty() || self.sentinel.trim() != self.sentinel {
            return bad("sentinel must be non-empty without surrounding whitespace".into());
        }
        if self.frs.is_empty() {
            return bad("no FR sources".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for src in &self.frs {
            if !seen.insert(src.project.to_ascii_lowercase()) {
                return bad(format!("project {} listed twice", src.project));
            }
            if src.path.is_none() && datasets::bundled_frs(&src.project).is_none() {
                return bad(format!("project {} has no path and no bundled dataset", src.project));
            }
        }
        if self.deterministic && self.seeds.is_none() {
            return bad("deterministic runs need explicit seeds".into());
        }
        if let ScorerConfig::Unigram { smoothing } = self.scorer {
            if !(smoothing > 0.0) {
                return bad("unigram smoothing must be positive".into());
            }
        }
        self.train
            .validate()
            .map_err(|e| PipelineError::Config(format!("train: {e}")))?;
        Ok(())
    }

    /// Seeds for this run. Non-deterministic runs without explicit seeds draw
    /// fresh ones once; call [`RunConfig::fix_seeds`] to pin them.
    pub fn seeds(&self) -> Seeds {
        self.seeds.expect("seeds fixed before the run starts")
    }

    pub fn fix_seeds(&mut self) {
        if self.seeds.is_none() {
            self.seeds = Some(Seeds::random());
        }
    }

    fn optional_text(&self, path: &Option<PathBuf>, bundled: &str) -> Result<String, PipelineError> {
        match path {
            Some(p) => read_text(&self.resolve(p)),
            None => Ok(bundled.to_string()),
        }
    }

    pub fn asvs_text(&self) -> Result<String, PipelineError> {
        self.optional_text(&self.asvs, datasets::ASVS_4_0_3)
    }

    pub fn exclusions_text(&self) -> Result<String, PipelineError> {
        self.optional_text(&self.exclusions, datasets::EXCLUSIONS)
    }

    pub fn synthesis_template_text(&self) -> Result<String, PipelineError> {
        self.optional_text(&self.synthesis_template, DEFAULT_SYNTHESIS_TEMPLATE)
    }

    pub fn generation_template_text(&self) -> Result<String, PipelineError> {
        self.optional_text(&self.generation_template, DEFAULT_GENERATION_TEMPLATE)
    }

    pub fn keywords_text(&self) -> Result<String, PipelineError> {
        self.optional_text(&self.keywords, DEFAULT_KEYWORDS)
    }

    pub fn fr_text(&self, src: &FrSource) -> Result<String, PipelineError> {
        match &src.path {
            Some(p) => read_text(&self.resolve(p)),
            None => datasets::bundled_frs(&src.project)
                .map(str::to_string)
                .ok_or_else(|| PipelineError::Config(format!("no bundled FRs for {}", src.project))),
        }
    }

    pub fn model_id(&self) -> String {
        match &self.chat {
            ChatConfig::Offline => "offline-rules".into(),
            ChatConfig::Echo => "echo".into(),
            ChatConfig::Scripted { .. } => "scripted".into(),
            ChatConfig::Http { model, .. } => model.clone(),
        }
    }

    /// SHA-256 over the configuration (without output location, paths or
    /// credentials) and the contents of every input.
    pub fn run_hash(&self) -> Result<String, PipelineError> {
        let mut cfg = serde_json::to_value(self).expect("config serializes");
        let obj = cfg.as_object_mut().expect("object");
        obj.remove("output_dir");
        for key in [
            "asvs",
            "exclusions",
            "synthesis_template",
            "generation_template",
            "keywords",
            "ratings",
            "trained_weights",
        ] {
            obj.remove(key);
        }
        obj.remove("frs");
        if let Some(chat) = obj.get_mut("chat").and_then(Value::as_object_mut) {
            chat.remove("script");
        }

        let mut inputs = BTreeMap::new();
        inputs.insert("asvs".to_string(), sha256_hex(self.asvs_text()?.as_bytes()));
        inputs.insert("exclusions".to_string(), sha256_hex(self.exclusions_text()?.as_bytes()));
        inputs.insert(
            "synthesis_template".to_string(),
            sha256_hex(self.synthesis_template_text()?.as_bytes()),
        );
        inputs.insert(
            "generation_template".to_string(),
            sha256_hex(self.generation_template_text()?.as_bytes()),
        );
        inputs.insert("keywords".to_string(), sha256_hex(self.keywords_text()?.as_bytes()));
        for (key, path) in [("ratings", &self.ratings), ("trained_weights", &self.trained_weights)] {
            if let Some(p) = path {
                inputs.insert(key.to_string(), sha256_hex(read_text(&self.resolve(p))?.as_bytes()));
            }
        }
        if let ChatConfig::Scripted { script } = &self.chat {
            inputs.insert("script".to_string(), sha256_hex(read_text(&self.resolve(script))?.as_bytes()));
        }
        for src in &self.frs {
            inputs.insert(format!("frs:{}", src.project), sha256_hex(self.fr_text(src)?.as_bytes()));
        }

        let doc = serde_json::json!({"config": cfg, "inputs": inputs});
        Ok(hex::encode(Sha256::digest(doc.to_string().as_bytes())))
    }

    pub fn build_chat(&self) -> Result<Box<dyn ChatBackend>, PipelineError> {
        Ok(match &self.chat {
            ChatConfig::Offline => Box::new(OfflineResponder::new(&self.sentinel)),
            ChatConfig::Echo => Box::new(EchoMock),
            ChatConfig::Scripted { script } => Box::new(ScriptedMock::new(MockScript::load(&self.resolve(script))?)),
            ChatConfig::Http {
                endpoint,
                model,
                api_key,
                requests_per_second,
            } => Box::new(HttpChatClient::new(HttpConfig {
                endpoint: endpoint.clone(),
                model: model.clone(),
                api_key: api_key.as_deref().map(interpolate_env).transpose()?,
                max_in_flight: self.max_in_flight,
                requests_per_second: *requests_per_second,
                ..Default::default()
            })?),
        })
    }

    pub fn build_scorer(&self, training_texts: &[String]) -> Result<Box<dyn LmScorer>, PipelineError> {
        Ok(match &self.scorer {
            ScorerConfig::Unigram { smoothing } => {
                Box::new(UnigramScorer::fit(training_texts.iter().map(String::as_str), *smoothing))
            }
            ScorerConfig::Http {
                endpoint,
                model,
                api_key,
            } => Box::new(HttpScorer::new(HttpConfig {
                endpoint: endpoint.clone(),
                model: model.clone(),
                api_key: api_key.as_deref().map(interpolate_env).transpose()?,
                max_in_flight: self.max_in_flight,
                ..Default::default()
            })?),
        })
    }
}
