//! Tokenization and token-embedding providers.
//!
//! One tokenizer serves every consumer in the crate (retrieval, TF-IDF,
//! vocabulary metrics, scope filtering), so the token weight table is
//! indexed by exactly the tokens the retriever sees.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowercased tokens of a piece of text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

/// Lowercase `text` and split it on every maximal run of non-alphanumeric
/// characters. Empty fragments are dropped, so an all-separator input yields
/// an empty sequence.
pub fn tokenize(text: &str) -> TokenSequence {
    let tokens = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect();
    TokenSequence {
        tokens,
        source: text.to_string(),
    }
}

/// Number of tokens `tokenize` would produce, without allocating them.
pub fn token_count(text: &str) -> usize {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .count()
}

/// Row-major `rows x dim` matrix of unit-norm token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    data: Vec<f64>,
    dim: usize,
    pub provider_id: String,
}

impl TokenEmbeddings {
    /// Wraps an already normalized matrix. Panics if `data` is not a whole
    /// number of rows.
    pub fn from_rows(data: Vec<f64>, dim: usize, provider_id: impl Into<String>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "ragged embedding matrix");
        Self {
            data,
            dim,
            provider_id: provider_id.into(),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Round every component to single precision. The on-disk index stores
    /// f32, so quantizing at build time makes save/load bit-exact.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed an empty token sequence")]
    EmptySequence,
    #[error("embedding provider {provider} failed after {attempts} attempt(s): {message}")]
    Transport {
        provider: String,
        attempts: u32,
        retryable: bool,
        retry_after: Option<Duration>,
        message: String,
    },
    #[error("embedding provider {provider} returned malformed output: {message}")]
    Malformed { provider: String, message: String },
}

/// Supplies one unit vector per token.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> String;
    fn dim(&self) -> usize;
    fn deterministic(&self) -> bool;
    fn embed(&self, seq: &TokenSequence) -> Result<TokenEmbeddings, EmbedError>;

    /// Rebuildable description, when the provider has one.
    fn spec(&self) -> Option<ProviderSpec> {
        None
    }
}

/// Serializable description of a provider, stored in index manifests so a
/// loaded index can rebuild the query-side encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Hash { dim: usize, seed: u64 },
    Remote { endpoint: String, model: String, dim: usize },
}

impl ProviderSpec {
    pub fn build(&self) -> Arc<dyn EmbeddingProvider> {
        match self {
            ProviderSpec::Hash { dim, seed } => Arc::new(HashEmbedder::new(*dim, *seed)),
            ProviderSpec::Remote {
                endpoint,
                model,
                dim,
            } => Arc::new(RemoteEmbedder::new(endpoint.clone(), model.clone(), *dim)),
        }
    }
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Hash {
            dim: 64,
            seed: HashEmbedder::DEFAULT_SEED,
        }
    }
}

/// Non-contextual token embedder driven by a seeded hash.
///
/// Algorithm, fixed so outputs are reproducible everywhere:
/// 1. `h = FNV-1a-64(seed as 8 little-endian bytes || token UTF-8 bytes)`
/// 2. a SplitMix64 stream seeded with `h` yields `dim` values; each 64-bit
///    output `x` maps to `(x >> 11) as f64 / 2^53 * 2 - 1`, uniform in [-1, 1)
/// 3. the vector is divided by its Euclidean norm.
///
/// Identical tokens therefore get identical rows; distinct tokens are close
/// to orthogonal for moderate `dim`.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub const DEFAULT_SEED: u64 = 0x5eed_2017_a5f5_0403;
    pub const MIN_DIM: usize = 8;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= Self::MIN_DIM, "hash embedder needs dim >= 8");
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut state = fnv1a64(&self.seed.to_le_bytes(), token.as_bytes());
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| {
                let x = splitmix64(&mut state);
                (x >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A zero vector needs all dim draws to be exactly -1.0 or 0.0.
        debug_assert!(norm > 0.0);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn provider_id(&self) -> String {
        format!("hash-fnv1a-splitmix/d{}/s{:016x}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn spec(&self) -> Option<ProviderSpec> {
        Some(ProviderSpec::Hash {
            dim: self.dim,
            seed: self.seed,
        })
    }

    fn embed(&self, seq: &TokenSequence) -> Result<TokenEmbeddings, EmbedError> {
        if seq.is_empty() {
            return Err(EmbedError::EmptySequence);
        }
        let mut data = Vec::with_capacity(seq.len() * self.dim);
        for tok in seq.iter() {
            data.extend(self.token_vector(tok));
        }
        Ok(TokenEmbeddings::from_rows(data, self.dim, self.provider_id()))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(prefix: &[u8], bytes: &[u8]) -> u64 {
    prefix
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Embedding service reached over HTTP.
///
/// Request: `POST {endpoint}` with `{"model": ..., "tokens": [...]}`.
/// Response: `{"embeddings": [[f64; dim], ...]}`, one row per token. Rows are
/// re-normalized on receipt.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    max_attempts: u32,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct RemoteEmbedRequest<'a> {
    model: &'a str,
    tokens: &'a [String],
}

#[derive(Deserialize)]
struct RemoteEmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: String, model: String, dim: usize) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("http client");
        Self {
            endpoint,
            model,
            dim,
            max_attempts: 3,
            client,
        }
    }

    fn transport(&self, attempts: u32, retryable: bool, message: impl fmt::Display) -> EmbedError {
        EmbedError::Transport {
            provider: self.provider_id(),
            attempts,
            retryable,
            retry_after: None,
            message: message.to_string(),
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> String {
        format!("remote:{}@{}", self.model, self.endpoint)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn spec(&self) -> Option<ProviderSpec> {
        Some(ProviderSpec::Remote {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            dim: self.dim,
        })
    }

    fn embed(&self, seq: &TokenSequence) -> Result<TokenEmbeddings, EmbedError> {
        if seq.is_empty() {
            return Err(EmbedError::EmptySequence);
        }
        let body = RemoteEmbedRequest {
            model: &self.model,
            tokens: &seq.tokens,
        };
        let mut attempt = 0;
        let parsed: RemoteEmbedResponse = loop {
            attempt += 1;
            let result = self.client.post(&self.endpoint).json(&body).send();
            match result {
                Ok(resp) if resp.status().is_success() => match resp.json() {
                    Ok(parsed) => break parsed,
                    Err(e) => {
                        return Err(EmbedError::Malformed {
                            provider: self.provider_id(),
                            message: e.to_string(),
                        })
                    }
                },
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let retryable = matches!(status, 408 | 429 | 500 | 502 | 503 | 504);
                    if !retryable || attempt >= self.max_attempts {
                        return Err(self.transport(attempt, retryable, format!("HTTP {status}")));
                    }
                }
                Err(e) => {
                    if attempt >= self.max_attempts {
                        return Err(self.transport(attempt, true, e));
                    }
                }
            }
            std::thread::sleep(Duration::from_millis(200 << attempt));
        };
        if parsed.embeddings.len() != seq.len() {
            return Err(EmbedError::Malformed {
                provider: self.provider_id(),
                message: format!(
                    "expected {} rows, got {}",
                    seq.len(),
                    parsed.embeddings.len()
                ),
            });
        }
        let mut data = Vec::with_capacity(seq.len() * self.dim);
        for row in parsed.embeddings {
            if row.len() != self.dim {
                return Err(EmbedError::Malformed {
                    provider: self.provider_id(),
                    message: format!("row of width {} (expected {})", row.len(), self.dim),
                });
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(EmbedError::Malformed {
                    provider: self.provider_id(),
                    message: "zero or non-finite row".into(),
                });
            }
            data.extend(row.into_iter().map(|x| x / norm));
        }
        Ok(TokenEmbeddings::from_rows(data, self.dim, self.provider_id()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_on_non_alphanumeric_runs() {
        assert_eq!(tokenize("Verify TLS 1.2!").tokens, ["verify", "tls", "1", "2"]);
        assert_eq!(tokenize("abc").tokens, ["abc"]);
        assert!(tokenize("---").is_empty());
        assert!(tokenize("").is_empty());
        assert_eq!(token_count("Verify TLS 1.2!"), 4);
    }

    #[test]
    fn tokenize_keeps_unicode_letters() {
        assert_eq!(tokenize("O'Hara ねこ").tokens, ["o", "hara", "ねこ"]);
    }

    #[test]
    fn hash_embedder_is_deterministic_and_unit_norm() {
        let p = HashEmbedder::new(64, 7);
        let a = p.embed(&tokenize("login")).unwrap();
        let b = p.embed(&tokenize("login")).unwrap();
        assert_eq!(a, b);
        let aa = p.embed(&tokenize("a a")).unwrap();
        assert_eq!(aa.row(0), aa.row(1));
        for i in 0..aa.rows() {
            let n: f64 = aa.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn distinct_tokens_are_not_parallel() {
        let p = HashEmbedder::new(64, HashEmbedder::DEFAULT_SEED);
        let c = cosine(&p.token_vector("login"), &p.token_vector("logout"));
        assert!(c < 1.0);
        let same = cosine(&p.token_vector("login"), &p.token_vector("login"));
        assert!((same - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = HashEmbedder::new(16, 1);
        assert!(matches!(p.embed(&tokenize("--")), Err(EmbedError::EmptySequence)));
    }

    #[test]
    fn quantize_keeps_unit_norm_within_contract() {
        let p = HashEmbedder::new(32, 3);
        let mut e = p.embed(&tokenize("session token cookie")).unwrap();
        e.quantize_f32();
        for i in 0..e.rows() {
            let n: f64 = e.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
