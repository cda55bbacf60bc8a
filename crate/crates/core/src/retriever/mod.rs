//! Token-weighted late-interaction retrieval.
//!
//! For an FR with token embeddings `q_1..q_m` and a VR with token embeddings
//! `d_1..d_n` and token weights `w_1..w_n`:
//!
//! ```text
//! score(FR, VR) = sum_i max_j ( w_j * cos(q_i, d_j) )
//! ```
//!
//! The weight multiplies before the max, and the sum runs over FR tokens.

mod index;
mod train;

pub use index::{build_index, load_index, load_index_with, save_index, IndexEntry, IndexManifest, VrIndex, INDEX_FORMAT_VERSION};
pub use train::{
    loss_and_grad, loss_and_grad_with, train_weights, Batch, BatchDoc, BatchPair, LossGrad, TrainConfig, TrainReport, TrainingPair,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VrId;
use crate::text::{EmbedError, TokenEmbeddings};

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("cannot score against an empty document")]
    EmptyDocument,
    #[error("weight vector has {weights} entries but the document has {rows} tokens")]
    WeightLength { weights: usize, rows: usize },
    #[error("embedding dimensions differ: query {query}, document {doc}")]
    DimMismatch { query: usize, doc: usize },
    #[error("query text has no tokens")]
    EmptyQuery,
    #[error("k must satisfy 1 <= k <= {max}, got {k}")]
    InvalidK { k: usize, max: usize },
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("index build aborted after {completed} of {total} VRs: {source}")]
    BuildAborted {
        completed: usize,
        total: usize,
        #[source]
        source: EmbedError,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("unknown VR id {0}")]
    UnknownVr(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("index load failed for {file}: {message}")]
    Load { file: String, message: String },
    #[error("index io error for {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

/// Weighted MaxSim score. Rows of both matrices are unit vectors, so the dot
/// product is the cosine.
pub fn score(
    fr_emb: &TokenEmbeddings,
    vr_emb: &TokenEmbeddings,
    vr_weights: &[f64],
) -> Result<f64, RetrieverError> {
    let n = vr_emb.rows();
    if n == 0 {
        return Err(RetrieverError::EmptyDocument);
    }
    if vr_weights.len() != n {
        return Err(RetrieverError::WeightLength {
            weights: vr_weights.len(),
            rows: n,
        });
    }
    if fr_emb.rows() == 0 {
        return Err(RetrieverError::EmptyQuery);
    }
    if fr_emb.dim() != vr_emb.dim() {
        return Err(RetrieverError::DimMismatch {
            query: fr_emb.dim(),
            doc: vr_emb.dim(),
        });
    }
    Ok((0..fr_emb.rows())
        .map(|i| best_match(fr_emb.row(i), vr_emb, vr_weights).1)
        .sum())
}

/// `(argmax j, max value)` of `w_j * <q, d_j>`. Ties go to the lowest j.
pub(crate) fn best_match(q: &[f64], vr_emb: &TokenEmbeddings, weights: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, w) in weights.iter().enumerate() {
        let v = w * dot(q, vr_emb.row(j));
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub vr_id: VrId,
    pub score: f64,
    pub rank: usize,
}

/// Sort `(id, score)` pairs by score descending, then id ascending, and
/// attach 1-based ranks.
pub fn rank_scores(mut scored: Vec<(VrId, f64)>) -> Vec<RetrievalResult> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (vr_id, score))| RetrievalResult {
            vr_id,
            score,
            rank: i + 1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[&[f64]]) -> TokenEmbeddings {
        let dim = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(r.iter().map(|x| x / n));
        }
        TokenEmbeddings::from_rows(data, dim, "test")
    }

    #[test]
    fn identical_rows_uniform_weights_score_m() {
        let e = unit_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        assert!((score(&e, &e, &[1.0; 4]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_max_before_sum() {
        // Embeddings whose pairwise cosines are [[0.5,0.9,0.1],[0.2,0.3,0.8]].
        // Query rows are e1, e2; document rows are built so <q_i, d_j> = c_ij.
        let c = [[0.5, 0.9, 0.1], [0.2, 0.3, 0.8]];
        let q = TokenEmbeddings::from_rows(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 3, "t");
        let mut d = Vec::new();
        for j in 0..3 {
            let (a, b) = (c[0][j], c[1][j]);
            let rest: f64 = 1.0 - a * a - b * b;
            d.extend([a, b, rest.sqrt()]);
        }
        let d = TokenEmbeddings::from_rows(d, 3, "t");
        let s = score(&q, &d, &[1.0, 2.0, 0.5]).unwrap();
        assert!((s - 2.4).abs() < 1e-12, "{s}");
    }

    #[test]
    fn orthogonal_embeddings_score_zero() {
        let q = unit_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let d = unit_rows(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(score(&q, &d, &[3.0, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn errors_on_bad_shapes() {
        let q = unit_rows(&[&[1.0, 0.0]]);
        let empty = TokenEmbeddings::from_rows(vec![], 2, "t");
        assert!(matches!(score(&q, &empty, &[]), Err(RetrieverError::EmptyDocument)));
        assert!(matches!(score(&q, &q, &[1.0, 1.0]), Err(RetrieverError::WeightLength { .. })));
        let q3 = unit_rows(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(score(&q3, &q, &[1.0]), Err(RetrieverError::DimMismatch { .. })));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let ranked = rank_scores(vec![
            ("10.1.1".parse().unwrap(), 1.0),
            ("2.1.1".parse().unwrap(), 1.0),
            ("3.1.1".parse().unwrap(), 2.0),
        ]);
        let ids: Vec<_> = ranked.iter().map(|r| r.vr_id.as_str()).collect();
        assert_eq!(ids, ["3.1.1", "2.1.1", "10.1.1"]);
        assert_eq!(ranked.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3]);
    }
}
