//! Preference losses over best-vs-others pairs.
//!
//! For a pair (winner `w`, loser `l`) with `E(w) < E(l)`,
//!
//! ```text
//! z = β·[(log p_θ(w) − log p_ref(w)) − (log p_θ(l) − log p_ref(l))]
//! DPO:   ℓ(z) = −log σ(z)
//! P-DPO: ℓ(z) = −[α·z + (1−α)·log σ(z)]
//! ```
//!
//! and the batch loss is the arithmetic mean over pairs. Both share
//! `dℓ/dz = −w(z)` with `w(z) = α + (1−α)·σ(−z)` (DPO is `α = 0`), so the
//! parameter gradient is `−β·mean[w(z)·(∇log p_θ(w) − ∇log p_θ(l))]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GqeError, Result};
use crate::model::{batch_log_probs, log_probs_then_grad, ModelParams};
use crate::pool::CircuitSequence;
use crate::replay::EnergySample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Dpo,
    Pdpo,
}

impl std::str::FromStr for LossVariant {
    type Err = GqeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(LossVariant::Dpo),
            "pdpo" | "p-dpo" => Ok(LossVariant::Pdpo),
            _ => Err(GqeError::input(format!("unknown loss {s:?} (expected dpo or pdpo)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    /// Ignored by [`LossVariant::Dpo`].
    pub alpha: f64,
    pub variant: LossVariant,
}

impl LossConfig {
    pub fn dpo(beta: f64) -> Self {
        LossConfig {
            beta,
            alpha: 0.0,
            variant: LossVariant::Dpo,
        }
    }

    pub fn pdpo(beta: f64, alpha: f64) -> Self {
        LossConfig {
            beta,
            alpha,
            variant: LossVariant::Pdpo,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(GqeError::input(format!("beta must be positive, got {}", self.beta)));
        }
        check_alpha(self.alpha)
    }

    /// The α that enters the loss: 0 for DPO.
    pub fn effective_alpha(&self) -> f64 {
        match self.variant {
            LossVariant::Dpo => 0.0,
            LossVariant::Pdpo => self.alpha,
        }
    }

    /// Batch loss for the given z-values.
    pub fn loss(&self, z: &[f64]) -> Result<f64> {
        match self.variant {
            LossVariant::Dpo => dpo_loss(z),
            LossVariant::Pdpo => pdpo_loss(z, self.alpha),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(GqeError::input(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: EnergySample,
    pub loser: EnergySample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceBatch {
    pairs: Vec<PreferencePair>,
}

impl PreferenceBatch {
    /// Rejects an empty list and any pair without a strict energy gap.
    pub fn new(pairs: Vec<PreferencePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(GqeError::EmptyBatch("no preference pairs".into()));
        }
        if let Some(p) = pairs
            .iter()
            .find(|p| p.winner.energy.partial_cmp(&p.loser.energy) != Some(std::cmp::Ordering::Less))
        {
            return Err(GqeError::input(format!(
                "winner energy {} is not below loser energy {}",
                p.winner.energy, p.loser.energy
            )));
        }
        Ok(PreferenceBatch { pairs })
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// The first minimum-energy sample beats every strictly higher-energy one.
pub fn pair_best_vs_others(samples: &[EnergySample]) -> Result<PreferenceBatch> {
    if samples.len() < 2 {
        return Err(GqeError::EmptyBatch(format!(
            "{} samples, need at least 2",
            samples.len()
        )));
    }
    if let Some(s) = samples.iter().find(|s| !s.energy.is_finite()) {
        return Err(GqeError::Numeric(format!("non-finite sample energy {}", s.energy)));
    }
    let best = samples
        .iter()
        .reduce(|a, b| if b.energy < a.energy { b } else { a })
        .expect("non-empty");
    let pairs: Vec<PreferencePair> = samples
        .iter()
        .filter(|s| s.energy > best.energy)
        .map(|s| PreferencePair {
            winner: best.clone(),
            loser: s.clone(),
        })
        .collect();
    if pairs.is_empty() {
        return Err(GqeError::EmptyBatch("all sample energies are equal".into()));
    }
    Ok(PreferenceBatch { pairs })
}

pub fn z_value(logp_w_theta: f64, logp_w_ref: f64, logp_l_theta: f64, logp_l_ref: f64, beta: f64) -> Result<f64> {
    let inputs = [logp_w_theta, logp_w_ref, logp_l_theta, logp_l_ref, beta];
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(GqeError::Numeric(format!("non-finite z input {inputs:?}")));
    }
    if beta <= 0.0 {
        return Err(GqeError::input(format!("beta must be positive, got {beta}")));
    }
    Ok(beta * ((logp_w_theta - logp_w_ref) - (logp_l_theta - logp_l_ref)))
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.fold(0.0, |acc, v| acc + v) / n as f64
}

pub fn dpo_loss(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(GqeError::input("loss over an empty batch"));
    }
    Ok(mean(z.iter().map(|&z| softplus(-z)), z.len()))
}

pub fn pdpo_loss(z: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if z.is_empty() {
        return Err(GqeError::input("loss over an empty batch"));
    }
    Ok(mean(z.iter().map(|&z| pdpo_pair_loss(z, alpha)), z.len()))
}

/// Single-pair P-DPO loss; at `alpha = 0` this is bit-identical to `softplus(−z)`.
pub fn pdpo_pair_loss(z: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * softplus(-z) - alpha * z
}

/// `w(z) = α + (1−α)·σ(−z)`, the magnitude of `dℓ/dz`.
pub fn gradient_weight(z: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(weight(z, alpha))
}

fn weight(z: f64, alpha: f64) -> f64 {
    alpha + (1.0 - alpha) * sigmoid(-z)
}

/// Loss value and per-pair diagnostics of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub z: Vec<f64>,
}

/// Distinct sequences of a batch plus, per pair, the (winner, loser) indices into them.
fn unique_sequences(batch: &PreferenceBatch) -> (Vec<CircuitSequence>, Vec<(usize, usize)>) {
    let mut index: HashMap<&[usize], usize> = HashMap::new();
    let mut seqs = Vec::new();
    let mut ids = Vec::with_capacity(batch.pairs.len());
    for p in &batch.pairs {
        let mut id = [0usize; 2];
        for (k, s) in [&p.winner, &p.loser].into_iter().enumerate() {
            id[k] = *index.entry(s.sequence.tokens.as_slice()).or_insert_with(|| {
                seqs.push(s.sequence.clone());
                seqs.len() - 1
            });
        }
        ids.push((id[0], id[1]));
    }
    (seqs, ids)
}

fn pair_z(batch: &PreferenceBatch, ids: &[(usize, usize)], logp: &[f64], beta: f64) -> Result<Vec<f64>> {
    batch
        .pairs
        .iter()
        .zip(ids)
        .map(|(p, &(w, l))| z_value(logp[w], p.winner.ref_logp, logp[l], p.loser.ref_logp, beta))
        .collect()
}

/// Batch loss under `params` (no gradient).
pub fn batch_loss(params: &ModelParams, batch: &PreferenceBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let (seqs, ids) = unique_sequences(batch);
    let logp: Vec<f64> = batch_log_probs(params, &seqs)?.iter().map(|r| r.total).collect();
    let z = pair_z(batch, &ids, &logp, cfg.beta)?;
    Ok(LossOutput { loss: cfg.loss(&z)?, z })
}

/// Batch loss with its parameter gradient accumulated into `grads`.
/// Each distinct sequence is run through the model once.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &PreferenceBatch,
    cfg: &LossConfig,
    grads: &mut ModelParams,
) -> Result<LossOutput> {
    cfg.validate()?;
    let (seqs, ids) = unique_sequences(batch);
    let alpha = cfg.effective_alpha();
    let mut out = None;
    log_probs_then_grad(params, &seqs, grads, |results| {
        let logp: Vec<f64> = results.iter().map(|r| r.total).collect();
        let z = pair_z(batch, &ids, &logp, cfg.beta)?;
        let loss = cfg.loss(&z)?;
        if !loss.is_finite() {
            return Err(GqeError::Numeric(format!("loss is {loss}")));
        }
        // dL/dlog p = ±β·dℓ/dz / n_pairs, summed over every pair a sequence joins.
        let per_pair = cfg.beta / batch.len() as f64;
        let mut scales = vec![0.0; seqs.len()];
        for (&zk, &(w, l)) in z.iter().zip(&ids) {
            let g = weight(zk, alpha) * per_pair;
            scales[w] -= g;
            scales[l] += g;
        }
        out = Some(LossOutput { loss, z });
        Ok(scales)
    })?;
    Ok(out.expect("scale callback ran"))
}
