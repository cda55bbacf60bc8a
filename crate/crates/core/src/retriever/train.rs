use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{best_match, dot, rank_scores, RetrieverError, VrIndex};
use crate::corpus::VrId;
use crate::text::TokenEmbeddings;
use crate::weighting::{TokenWeightTable, WEIGHT_MAX, WEIGHT_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub validation_k: usize,
    /// Recorded for a trainable remote encoder; the local encoder is frozen.
    pub backbone_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 6e-7,
            epochs: 3,
            batch_size: 16,
            seed: 17,
            temperature: 1.0,
            patience: None,
            validation_k: 5,
            backbone_learning_rate: 3e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RetrieverError> {
        // Zero is allowed as an explicit no-op run.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RetrieverError::Config(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(RetrieverError::Config(format!("batch_size {} < 2", self.batch_size)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RetrieverError::Config(format!("temperature {}", self.temperature)));
        }
        if self.validation_k == 0 {
            return Err(RetrieverError::Config("validation_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub fr_text: String,
    pub vr_id: VrId,
}

#[derive(Debug, Clone)]
pub struct BatchDoc {
    pub vr_id: VrId,
    pub tokens: Vec<String>,
    pub embeddings: TokenEmbeddings,
}

#[derive(Debug, Clone)]
pub struct BatchPair {
    pub fr: TokenEmbeddings,
    /// Position of the gold VR in `Batch::docs`.
    pub positive: usize,
}

/// In-batch training unit. Each distinct VR appears once in `docs`, so a VR
/// repeated across pairs only enters the softmax denominator once.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub docs: Vec<BatchDoc>,
    pub pairs: Vec<BatchPair>,
}

impl Batch {
    pub fn push(&mut self, fr: TokenEmbeddings, vr_id: &VrId, tokens: &[String], embeddings: &TokenEmbeddings) {
        let positive = match self.docs.iter().position(|d| &d.vr_id == vr_id) {
            Some(p) => {
                debug!(vr = %vr_id, "duplicate VR in batch collapsed for softmax denominator");
                p
            }
            None => {
                self.docs.push(BatchDoc {
                    vr_id: vr_id.clone(),
                    tokens: tokens.to_vec(),
                    embeddings: embeddings.clone(),
                });
                self.docs.len() - 1
            }
        };
        self.pairs.push(BatchPair { fr, positive });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub gradient: BTreeMap<String, f64>,
}

pub fn loss_and_grad(batch: &Batch, table: &TokenWeightTable) -> LossGrad {
    loss_and_grad_with(batch, table, 1.0)
}

/// Mean in-batch softmax cross-entropy and its gradient with respect to each
/// token weight occurring in the batch documents.
pub fn loss_and_grad_with(batch: &Batch, table: &TokenWeightTable, temperature: f64) -> LossGrad {
    let mut gradient: BTreeMap<String, f64> = BTreeMap::new();
    for d in &batch.docs {
        for t in &d.tokens {
            gradient.entry(t.clone()).or_insert(0.0);
        }
    }
    if batch.pairs.is_empty() {
        return LossGrad { loss: 0.0, gradient };
    }
    let weights: Vec<Vec<f64>> = batch
        .docs
        .iter()
        .map(|d| d.tokens.iter().map(|t| table.weight(t)).collect())
        .collect();
    let b = batch.pairs.len() as f64;
    let mut loss = 0.0;
    for pair in &batch.pairs {
        // Per document: score plus the (token, cosine) contributions of each
        // query row's argmax, which is what d score / d w_t sums over.
        let mut logits = Vec::with_capacity(batch.docs.len());
        let mut hits: Vec<Vec<(usize, f64)>> = Vec::with_capacity(batch.docs.len());
        for (d, w) in batch.docs.iter().zip(&weights) {
            let mut s = 0.0;
            let mut h = Vec::with_capacity(pair.fr.rows());
            for i in 0..pair.fr.rows() {
                let q = pair.fr.row(i);
                let (j, v) = best_match(q, &d.embeddings, w);
                s += v;
                h.push((j, dot(q, d.embeddings.row(j))));
            }
            logits.push(s / temperature);
            hits.push(h);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += -(logits[pair.positive] - max) + z.ln();
        for (k, d) in batch.docs.iter().enumerate() {
            let p = (logits[k] - max).exp() / z;
            let coef = (p - if k == pair.positive { 1.0 } else { 0.0 }) / (temperature * b);
            if coef == 0.0 {
                continue;
            }
            for &(j, c) in &hits[k] {
                *gradient.get_mut(&d.tokens[j]).expect("token registered") += coef * c;
            }
        }
    }
    LossGrad {
        loss: loss / b,
        gradient,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Fraction of validation pairs whose gold VR ranks within `validation_k`,
    /// measured after each epoch.
    pub validation_metric: Vec<f64>,
    pub initial_validation_metric: Option<f64>,
    pub steps: u64,
    /// Batch pairs whose VR was already in the batch.
    #[serde(default)]
    pub collapsed_duplicates: usize,
    pub final_version: u64,
    pub early_stop: Option<String>,
}

fn apply_step(table: &mut TokenWeightTable, grad: &BTreeMap<String, f64>, lr: f64) {
    for (t, g) in grad {
        let w = table.weight(t);
        let updated = (w - lr * g).clamp(WEIGHT_MIN, WEIGHT_MAX);
        if updated != w {
            table.weights.insert(t.clone(), updated);
        }
    }
    table.version += 1;
    table.trained = true;
}

fn validation_rate(index: &VrIndex, val: &[(TokenEmbeddings, VrId)], k: usize) -> Result<Option<f64>, RetrieverError> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut hit = 0usize;
    for (q, gold) in val {
        let ranked = rank_scores(index.score_all(q)?);
        if ranked.iter().take(k).any(|r| &r.vr_id == gold) {
            hit += 1;
        }
    }
    Ok(Some(hit as f64 / val.len() as f64))
}

/// Mini-batch gradient descent on the index's weight table. Embeddings stay
/// frozen. Single-threaded and seeded, so the result is reproducible.
pub fn train_weights(
    index: &VrIndex,
    train: &[TrainingPair],
    validation: &[TrainingPair],
    config: &TrainConfig,
) -> Result<(TokenWeightTable, TrainReport), RetrieverError> {
    config.validate()?;
    let embed = |pairs: &[TrainingPair]| -> Result<Vec<(TokenEmbeddings, VrId)>, RetrieverError> {
        pairs
            .iter()
            .map(|p| {
                if index.entry(&p.vr_id).is_none() {
                    return Err(RetrieverError::UnknownVr(p.vr_id.to_string()));
                }
                Ok((index.embed_query(&p.fr_text)?, p.vr_id.clone()))
            })
            .collect()
    };
    let train_emb = embed(train)?;
    let val_emb = embed(validation)?;

    let mut table = index.table().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_emb.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        validation_metric: Vec::new(),
        initial_validation_metric: validation_rate(index, &val_emb, config.validation_k)?,
        steps: 0,
        collapsed_duplicates: 0,
        final_version: table.version,
        early_stop: None,
    };
    let mut best = report.initial_validation_metric.unwrap_or(f64::NEG_INFINITY);
    let mut stale = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Batch::default();
            for &i in chunk {
                let (fr, vr) = &train_emb[i];
                let e = index.entry(vr).expect("checked above");
                batch.push(fr.clone(), vr, &e.tokens, &e.embeddings);
            }
            report.collapsed_duplicates += batch.pairs.len() - batch.docs.len();
            let lg = loss_and_grad_with(&batch, &table, config.temperature);
            epoch_loss += lg.loss;
            batches += 1;
            apply_step(&mut table, &lg.gradient, config.learning_rate);
            report.steps += 1;
        }
        report
            .epoch_losses
            .push(if batches == 0 { 0.0 } else { epoch_loss / batches as f64 });

        let metric = validation_rate(&index.with_table(table.clone()), &val_emb, config.validation_k)?;
        if let Some(m) = metric {
            report.validation_metric.push(m);
            if m > best {
                best = m;
                stale = 0;
            } else {
                stale += 1;
            }
            if let Some(p) = config.patience {
                if stale >= p && epoch + 1 < config.epochs {
                    report.early_stop = Some(format!(
                        "validation metric did not improve for {p} epochs (best {best:.4})"
                    ));
                    break;
                }
            }
        }
    }
    if report.collapsed_duplicates > 0 {
        warn!(
            count = report.collapsed_duplicates,
            "pairs sharing a VR with an earlier pair in the same batch were scored against one document"
        );
    }
    report.final_version = table.version;
    Ok((table, report))
}
