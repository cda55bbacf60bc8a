use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rank_scores, score, RetrievalResult, RetrieverError};
use crate::corpus::{VrCorpus, VrId};
use crate::text::{tokenize, EmbeddingProvider, ProviderSpec, TokenEmbeddings};
use crate::weighting::{lookup_weights, TokenWeightTable};

pub const INDEX_FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const EMBEDDINGS_FILE: &str = "embeddings.bin";
const OFFSETS_FILE: &str = "offsets.json";
const WEIGHTS_FILE: &str = "weights.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub provider_id: String,
    pub provider: Option<ProviderSpec>,
    pub dim: usize,
    pub corpus_hash: String,
    pub corpus_version: String,
    pub table_version: u64,
    pub entries: usize,
    /// Left empty in deterministic runs so rebuilt indexes are byte-identical.
    #[serde(default)]
    pub build_timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub vr_id: VrId,
    pub tokens: Vec<String>,
    pub embeddings: TokenEmbeddings,
    pub weights: Vec<f64>,
}

/// Precomputed VR token embeddings and weights. Immutable once built;
/// reweighting produces a new index sharing nothing mutable.
#[derive(Clone)]
pub struct VrIndex {
    entries: Vec<IndexEntry>,
    table: TokenWeightTable,
    provider: Arc<dyn EmbeddingProvider>,
    manifest: IndexManifest,
}

impl fmt::Debug for VrIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VrIndex")
            .field("entries", &self.entries.len())
            .field("manifest", &self.manifest)
            .finish()
    }
}

impl VrIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &VrId) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.vr_id.cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn position(&self, id: &VrId) -> Option<usize> {
        self.entries.binary_search_by(|e| e.vr_id.cmp(id)).ok()
    }

    pub fn table(&self) -> &TokenWeightTable {
        &self.table
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    /// Copy of this index scored with a different weight table. Embeddings are
    /// reused, only weight vectors change.
    pub fn with_table(&self, table: TokenWeightTable) -> VrIndex {
        let entries = self
            .entries
            .iter()
            .map(|e| IndexEntry {
                weights: e.tokens.iter().map(|t| table.weight(t)).collect(),
                ..e.clone()
            })
            .collect();
        let mut manifest = self.manifest.clone();
        manifest.table_version = table.version;
        VrIndex {
            entries,
            table,
            provider: Arc::clone(&self.provider),
            manifest,
        }
    }

    /// Zero-shot configuration: same embeddings, every weight forced to 1.
    pub fn zero_shot(&self) -> VrIndex {
        let vocab: Vec<String> = self.table.weights.keys().cloned().collect();
        let mut table = TokenWeightTable::uniform(vocab.iter().map(String::as_str));
        table.version = 0;
        self.with_table(table)
    }

    pub fn embed_query(&self, text: &str) -> Result<TokenEmbeddings, RetrieverError> {
        let seq = tokenize(text);
        if seq.is_empty() {
            return Err(RetrieverError::EmptyQuery);
        }
        Ok(self.provider.embed(&seq)?)
    }

    /// Score every VR for an embedded query, in index (id) order.
    pub fn score_all(&self, query: &TokenEmbeddings) -> Result<Vec<(VrId, f64)>, RetrieverError> {
        self.entries
            .par_iter()
            .map(|e| Ok((e.vr_id.clone(), score(query, &e.embeddings, &e.weights)?)))
            .collect()
    }

    /// Full ranking of all VRs for an embedded query.
    pub fn rank_all(&self, query: &TokenEmbeddings) -> Result<Vec<RetrievalResult>, RetrieverError> {
        Ok(rank_scores(self.score_all(query)?))
    }

    pub fn retrieve_top_k(&self, fr_text: &str, k: usize) -> Result<Vec<RetrievalResult>, RetrieverError> {
        if k == 0 || k > self.len() {
            return Err(RetrieverError::InvalidK { k, max: self.len() });
        }
        let query = self.embed_query(fr_text)?;
        let mut ranked = self.rank_all(&query)?;
        ranked.truncate(k);
        Ok(ranked)
    }

    /// 1-based rank of `vr_id` in the full ranking for `fr_text`.
    pub fn rank_of(&self, fr_text: &str, vr_id: &VrId) -> Result<usize, RetrieverError> {
        if self.entry(vr_id).is_none() {
            return Err(RetrieverError::UnknownVr(vr_id.to_string()));
        }
        let query = self.embed_query(fr_text)?;
        let ranked = self.rank_all(&query)?;
        Ok(ranked
            .iter()
            .find(|r| &r.vr_id == vr_id)
            .map(|r| r.rank)
            .expect("id present in index"))
    }
}

/// Precompute embeddings and weights for every VR. Embeddings are rounded to
/// f32 precision, matching the on-disk format.
pub fn build_index(
    corpus: &VrCorpus,
    provider: Arc<dyn EmbeddingProvider>,
    table: TokenWeightTable,
    build_timestamp: Option<String>,
) -> Result<VrIndex, RetrieverError> {
    if corpus.is_empty() {
        return Err(RetrieverError::EmptyCorpus);
    }
    let mut records: Vec<_> = corpus.records.iter().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let total = records.len();
    let mut entries = Vec::with_capacity(total);
    for (done, r) in records.into_iter().enumerate() {
        let seq = tokenize(&r.composed_text);
        let mut embeddings = provider
            .embed(&seq)
            .map_err(|source| RetrieverError::BuildAborted {
                completed: done,
                total,
                source,
            })?;
        embeddings.quantize_f32();
        let weights = lookup_weights(&table, &seq);
        entries.push(IndexEntry {
            vr_id: r.id.clone(),
            tokens: seq.tokens,
            embeddings,
            weights,
        });
    }
    let manifest = IndexManifest {
        format_version: INDEX_FORMAT_VERSION,
        provider_id: provider.provider_id(),
        provider: provider.spec(),
        dim: provider.dim(),
        corpus_hash: corpus.content_hash(),
        corpus_version: corpus.source_version.clone(),
        table_version: table.version,
        entries: entries.len(),
        build_timestamp,
    };
    Ok(VrIndex {
        entries,
        table,
        provider,
        manifest,
    })
}

fn io_err(path: &Path, source: std::io::Error) -> RetrieverError {
    RetrieverError::Io {
        file: path.display().to_string(),
        source,
    }
}

fn load_err(path: &Path, message: impl Into<String>) -> RetrieverError {
    RetrieverError::Load {
        file: path.display().to_string(),
        message: message.into(),
    }
}

/// Write `manifest.json`, `embeddings.bin` (little-endian f32, row-major),
/// `offsets.json` (vr_id -> [row_start, n]) and `weights.json`.
pub fn save_index(index: &VrIndex, dir: &Path) -> Result<(), RetrieverError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut bin = Vec::new();
    let mut offsets: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut row = 0usize;
    for e in &index.entries {
        for v in e.embeddings.as_slice() {
            bin.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        offsets.insert(e.vr_id.to_string(), (row, e.embeddings.rows()));
        row += e.embeddings.rows();
    }
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))
    };
    write(EMBEDDINGS_FILE, &bin)?;
    write(
        OFFSETS_FILE,
        serde_json::to_string_pretty(&offsets).expect("offsets").as_bytes(),
    )?;
    write(WEIGHTS_FILE, index.table.to_json().as_bytes())?;
    write(
        MANIFEST_FILE,
        serde_json::to_string_pretty(&index.manifest).expect("manifest").as_bytes(),
    )?;
    Ok(())
}

/// Load an index saved by [`save_index`], rebuilding the provider from the
/// manifest. The corpus must hash to the manifest's corpus hash.
pub fn load_index(dir: &Path, corpus: &VrCorpus) -> Result<VrIndex, RetrieverError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: IndexManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?,
    )
    .map_err(|e| load_err(&manifest_path, e.to_string()))?;
    let provider = manifest
        .provider
        .as_ref()
        .ok_or_else(|| load_err(&manifest_path, "manifest has no rebuildable provider"))?
        .build();
    load_index_with(dir, corpus, provider)
}

pub fn load_index_with(
    dir: &Path,
    corpus: &VrCorpus,
    provider: Arc<dyn EmbeddingProvider>,
) -> Result<VrIndex, RetrieverError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: IndexManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?,
    )
    .map_err(|e| load_err(&manifest_path, e.to_string()))?;
    if manifest.format_version != INDEX_FORMAT_VERSION {
        return Err(load_err(
            &manifest_path,
            format!(
                "format version {} (expected {INDEX_FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let hash = corpus.content_hash();
    if manifest.corpus_hash != hash {
        return Err(load_err(
            &manifest_path,
            format!("corpus hash {} does not match {hash}", manifest.corpus_hash),
        ));
    }
    if manifest.provider_id != provider.provider_id() || manifest.dim != provider.dim() {
        return Err(load_err(&manifest_path, "provider does not match manifest"));
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let table = TokenWeightTable::from_json(
        &fs::read_to_string(&weights_path).map_err(|e| io_err(&weights_path, e))?,
    )
    .map_err(|e| load_err(&weights_path, e.to_string()))?;
    if table.version != manifest.table_version {
        return Err(load_err(&weights_path, "table version does not match manifest"));
    }

    let offsets_path = dir.join(OFFSETS_FILE);
    let offsets: BTreeMap<String, (usize, usize)> = serde_json::from_str(
        &fs::read_to_string(&offsets_path).map_err(|e| io_err(&offsets_path, e))?,
    )
    .map_err(|e| load_err(&offsets_path, e.to_string()))?;

    let bin_path = dir.join(EMBEDDINGS_FILE);
    let bin = fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let dim = manifest.dim;
    if bin.len() % (4 * dim) != 0 {
        return Err(load_err(&bin_path, format!("{} bytes is not a whole number of rows", bin.len())));
    }
    let total_rows = bin.len() / (4 * dim);

    let mut records: Vec<_> = corpus.records.iter().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if offsets.len() != records.len() {
        return Err(load_err(
            &offsets_path,
            format!("{} entries, corpus has {}", offsets.len(), records.len()),
        ));
    }
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let (start, n) = *offsets
            .get(r.id.as_str())
            .ok_or_else(|| load_err(&offsets_path, format!("missing entry for {}", r.id)))?;
        let seq = tokenize(&r.composed_text);
        if n != seq.len() {
            return Err(load_err(
                &offsets_path,
                format!("{} has {n} rows but {} tokens", r.id, seq.len()),
            ));
        }
        if start + n > total_rows {
            return Err(load_err(&bin_path, format!("truncated: {} needs rows up to {}", r.id, start + n)));
        }
        let bytes = &bin[start * dim * 4..(start + n) * dim * 4];
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        entries.push(IndexEntry {
            vr_id: r.id.clone(),
            weights: lookup_weights(&table, &seq),
            tokens: seq.tokens,
            embeddings: TokenEmbeddings::from_rows(data, dim, manifest.provider_id.clone()),
        });
    }
    Ok(VrIndex {
        entries,
        table,
        provider,
        manifest,
    })
}
