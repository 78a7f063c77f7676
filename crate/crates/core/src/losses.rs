//! Adaptation objectives and the source pre-training loss.
//!
//! The two contrastive terms share one shape: for each anchor in the batch,
//! the live (normalised) feature is compared with every feature-bank row
//! except the anchor's own, scaled by `1/tau`. A positive `p` contributes
//! `logsumexp_j(s_ij) - s_ip`. Anchors come from the current batch while
//! positives and denominators range over the whole bank; results are batch
//! means so the trade-off weights do not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::banks::{knn, same_class_set, FeatureBank, ScoreBank};
use crate::error::{EcanError, Result};
use crate::grad::{Tape, Tensor, Var};

/// Probabilities are floored here before any logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub tau: f64,
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_adapt: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.05,
            k: 1,
            lambda: 1.0,
            beta: 0.1,
            batch_size: 32,
            epochs: 30,
            pretrain_epochs: 100,
            lr_pretrain: 0.01,
            lr_adapt: 1e-4,
            momentum: 0.9,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(EcanError::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return fail("lambda and beta must be >= 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr_pretrain >= 0.0 && self.lr_adapt >= 0.0) {
            return fail("learning rates must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Scalar values of one evaluation of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ncl: f64,
    pub scl: f64,
    pub div: f64,
    pub total: f64,
    pub lambda: f64,
    pub beta: f64,
}

/// `div + lambda * ncl + beta * scl`.
pub fn total_loss(ncl: f64, scl: f64, div: f64, lambda: f64, beta: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0 && beta >= 0.0) {
        return Err(EcanError::Config(format!(
            "trade-off weights must be >= 0, got lambda={lambda} beta={beta}"
        )));
    }
    Ok(LossBreakdown {
        ncl,
        scl,
        div,
        total: div + lambda * ncl + beta * scl,
        lambda,
        beta,
    })
}

fn check_contrastive_inputs(
    tape: &Tape,
    batch_features: Var,
    batch_indices: &[usize],
    bank: &FeatureBank,
    tau: f64,
) -> Result<()> {
    let n_t = bank.len();
    if n_t < 2 {
        return Err(EcanError::Config(format!(
            "contrastive losses need at least 2 bank rows, got {n_t}"
        )));
    }
    if !(tau > 0.0) {
        return Err(EcanError::Config(format!("tau must be positive, got {tau}")));
    }
    let (n, d) = tape.value(batch_features).dims();
    if n != batch_indices.len() || n == 0 {
        return Err(EcanError::Dimension(format!(
            "{n} feature rows for {} batch indices",
            batch_indices.len()
        )));
    }
    if d != bank.dim() {
        return Err(EcanError::Dimension(format!(
            "batch feature width {d} against bank width {}",
            bank.dim()
        )));
    }
    if let Some(&bad) = batch_indices.iter().find(|&&i| i >= n_t) {
        return Err(EcanError::Index { index: bad, len: n_t });
    }
    Ok(())
}

/// Shared InfoNCE body. `positives[r]` lists bank rows for batch anchor `r`
/// and `weights[r]` multiplies each of that anchor's positive terms.
fn contrastive(
    tape: &mut Tape,
    batch_features: Var,
    batch_indices: &[usize],
    bank: &FeatureBank,
    tau: f64,
    positives: &[Vec<usize>],
    weights: &[f64],
) -> Result<Var> {
    let n = batch_indices.len();
    let n_t = bank.len();
    let d = bank.dim();

    let z = tape.l2_normalize_rows(batch_features)?;
    let mut bank_t = vec![0.0; d * n_t];
    for j in 0..n_t {
        for (c, v) in bank.row(j).iter().enumerate() {
            bank_t[c * n_t + j] = *v;
        }
    }
    let bank_t = tape.constant(Tensor::matrix(d, n_t, bank_t)?);
    let cos = tape.matmul(z, bank_t)?;
    let logits = tape.scale(cos, 1.0 / tau)?;

    let mut mask = vec![true; n * n_t];
    let mut pos_weight = vec![0.0; n * n_t];
    let mut row_weight = vec![0.0; n];
    for (r, &anchor) in batch_indices.iter().enumerate() {
        mask[r * n_t + anchor] = false;
        for &p in &positives[r] {
            pos_weight[r * n_t + p] += weights[r];
            row_weight[r] += weights[r];
        }
    }
    let lse = tape.logsumexp_rows(logits, Some(mask))?;
    let row_weight = tape.constant(Tensor::matrix(n, 1, row_weight)?);
    let pos_weight = tape.constant(Tensor::matrix(n, n_t, pos_weight)?);
    let weighted_lse = tape.mul(lse, row_weight)?;
    let denominators = tape.sum(weighted_lse)?;
    let weighted_pos = tape.mul(logits, pos_weight)?;
    let numerators = tape.sum(weighted_pos)?;
    tape.sub(denominators, numerators)
}

/// Nearest-neighbour contrastive loss: each anchor's `k` nearest bank rows
/// are its positives, every other bank row a negative.
pub fn ncl_loss(
    tape: &mut Tape,
    batch_features: Var,
    batch_indices: &[usize],
    bank: &FeatureBank,
    tau: f64,
    k: usize,
) -> Result<Var> {
    check_contrastive_inputs(tape, batch_features, batch_indices, bank, tau)?;
    let positives = batch_indices
        .iter()
        .map(|&i| knn(bank, i, k))
        .collect::<Result<Vec<_>>>()?;
    let weights = vec![1.0 / batch_indices.len() as f64; batch_indices.len()];
    contrastive(tape, batch_features, batch_indices, bank, tau, &positives, &weights)
}

/// Pseudo-label supervised contrastive loss: positives are all bank rows
/// whose stored prediction agrees with the anchor's. Anchors without any
/// positive add zero but still count in the batch mean.
pub fn scl_loss(
    tape: &mut Tape,
    batch_features: Var,
    batch_indices: &[usize],
    feature_bank: &FeatureBank,
    score_bank: &ScoreBank,
    tau: f64,
) -> Result<Var> {
    check_contrastive_inputs(tape, batch_features, batch_indices, feature_bank, tau)?;
    if score_bank.len() != feature_bank.len() {
        return Err(EcanError::Dimension(format!(
            "score bank has {} rows, feature bank {}",
            score_bank.len(),
            feature_bank.len()
        )));
    }
    let n = batch_indices.len() as f64;
    let positives = batch_indices
        .iter()
        .map(|&i| same_class_set(score_bank, i))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = positives
        .iter()
        .map(|p| if p.is_empty() { 0.0 } else { 1.0 / (n * p.len() as f64) })
        .collect();
    contrastive(tape, batch_features, batch_indices, feature_bank, tau, &positives, &weights)
}

/// KL divergence of the batch-mean prediction from the uniform distribution:
/// `sum_c pbar_c * log(C * pbar_c)`.
pub fn div_loss(tape: &mut Tape, batch_probs: Var) -> Result<Var> {
    let c = tape.value(batch_probs).cols();
    let mean = tape.column_mean(batch_probs)?;
    let floored = tape.clamp_min(mean, LOG_FLOOR)?;
    let log_mean = tape.log(floored)?;
    let plogp = tape.mul(mean, log_mean)?;
    let entropy_part = tape.sum(plogp)?;
    let mass = tape.sum(mean)?;
    let uniform_part = tape.scale(mass, (c as f64).ln())?;
    tape.add(entropy_part, uniform_part)
}

/// Batch-mean cross-entropy against smoothed one-hot targets: `1 - epsilon`
/// on the true class and `epsilon / (C - 1)` on each other class.
pub fn ce_label_smoothing(tape: &mut Tape, probs: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
    let (n, c) = tape.value(probs).dims();
    if labels.len() != n || n == 0 {
        return Err(EcanError::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(EcanError::Data(format!("label {bad} outside [0, {c})")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(EcanError::Config(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    if c < 2 && epsilon > 0.0 {
        return Err(EcanError::Config("label smoothing needs at least 2 classes".into()));
    }
    let off = if c > 1 { epsilon / (c - 1) as f64 } else { 0.0 };
    let mut targets = vec![off; n * c];
    for (r, &l) in labels.iter().enumerate() {
        targets[r * c + l] = 1.0 - epsilon;
    }
    let targets = tape.constant(Tensor::matrix(n, c, targets)?);
    let floored = tape.clamp_min(probs, LOG_FLOOR)?;
    let logp = tape.log(floored)?;
    let weighted = tape.mul(targets, logp)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / n as f64)
}
