//! Batched teacher-forced forward pass, backpropagation, and sequence
//! log-probabilities.

use super::layers::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, LayerNormCache,
};
use super::ModelParams;
use crate::error::{GqeError, Result};
use crate::pool::CircuitSequence;

/// `log p(j⃗)` and its per-position terms `log p(j_i | j_<i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbResult {
    pub total: f64,
    pub per_token: Vec<f64>,
}

struct BlockCache {
    ln_attn: LayerNormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln_ff: LayerNormCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct Forward {
    batch: usize,
    len: usize,
    inputs: Vec<Vec<usize>>,
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
    z: Vec<f64>,
    /// `(batch·len) × vocab`
    pub logits: Vec<f64>,
}

fn attention_forward(qkv: &[f64], batch: usize, len: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut att = vec![0.0; batch * len * d];
    let mut probs = vec![0.0; batch * heads * len * len];
    let row = |b: usize, t: usize| (b * len + t) * 3 * d;
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..len {
                let q = &qkv[row(b, i) + h * dh..row(b, i) + (h + 1) * dh];
                let p = &mut probs[((b * heads + h) * len + i) * len..((b * heads + h) * len + i + 1) * len];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &qkv[row(b, j) + d + h * dh..row(b, j) + d + (h + 1) * dh];
                    let s = scale * q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>();
                    p[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                let out = &mut att[(b * len + i) * d + h * dh..(b * len + i) * d + (h + 1) * dh];
                for j in 0..=i {
                    p[j] /= sum;
                    let v = &qkv[row(b, j) + 2 * d + h * dh..row(b, j) + 2 * d + (h + 1) * dh];
                    out.iter_mut().zip(v).for_each(|(o, x)| *o += p[j] * x);
                }
            }
        }
    }
    (att, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    datt: &[f64],
    batch: usize,
    len: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; qkv.len()];
    let row = |b: usize, t: usize| (b * len + t) * 3 * d;
    let mut dp = vec![0.0; len];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..len {
                let p = &probs[((b * heads + h) * len + i) * len..((b * heads + h) * len + i + 1) * len];
                let da = &datt[(b * len + i) * d + h * dh..(b * len + i) * d + (h + 1) * dh];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vo = row(b, j) + 2 * d + h * dh;
                    let v = &qkv[vo..vo + dh];
                    dp[j] = da.iter().zip(v).map(|(x, y)| x * y).sum();
                    dot += p[j] * dp[j];
                    dqkv[vo..vo + dh].iter_mut().zip(da).for_each(|(g, x)| *g += p[j] * x);
                }
                let qo = row(b, i) + h * dh;
                for j in 0..=i {
                    let ds = scale * p[j] * (dp[j] - dot);
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = row(b, j) + d + h * dh;
                    for c in 0..dh {
                        dqkv[qo + c] += ds * qkv[ko + c];
                        dqkv[ko + c] += ds * qkv[qo + c];
                    }
                }
            }
        }
    }
    dqkv
}

/// Teacher-forced forward over equal-length input rows (BOS already prepended).
pub(crate) fn forward(params: &ModelParams, inputs: &[Vec<usize>]) -> Forward {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let batch = inputs.len();
    let len = inputs.first().map_or(0, Vec::len);
    debug_assert!(inputs.iter().all(|r| r.len() == len) && len <= cfg.max_len);
    let rows = batch * len;

    let mut x = vec![0.0; rows * d];
    for (b, seq) in inputs.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let dst = &mut x[(b * len + t) * d..(b * len + t + 1) * d];
            let te = &params.tok_emb.data[tok * d..(tok + 1) * d];
            let pe = &params.pos_emb.data[t * d..(t + 1) * d];
            for c in 0..d {
                dst[c] = te[c] + pe[c];
            }
        }
    }

    let mut caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (a, ln_attn) = layer_norm_forward(&blk.ln_attn, &x, d);
        let qkv = linear_forward(&blk.qkv, &a, rows);
        let (att, probs) = attention_forward(&qkv, batch, len, d, cfg.n_heads);
        let proj = linear_forward(&blk.attn_out, &att, rows);
        x.iter_mut().zip(&proj).for_each(|(xi, p)| *xi += p);

        let (c, ln_ff) = layer_norm_forward(&blk.ln_ff, &x, d);
        let u = linear_forward(&blk.ff_in, &c, rows);
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let f = linear_forward(&blk.ff_out, &g, rows);
        x.iter_mut().zip(&f).for_each(|(xi, p)| *xi += p);

        caches.push(BlockCache {
            ln_attn,
            a,
            qkv,
            probs,
            att,
            ln_ff,
            c,
            u,
            g,
        });
    }

    let (z, ln_final) = layer_norm_forward(&params.ln_final, &x, d);
    let logits = linear_forward(&params.head, &z, rows);
    Forward {
        batch,
        len,
        inputs: inputs.to_vec(),
        blocks: caches,
        ln_final,
        z,
        logits,
    }
}

/// Accumulates `Σ dlogits · ∂logits/∂θ` into `grads`.
pub(crate) fn backward(params: &ModelParams, fwd: &Forward, dlogits: &[f64], grads: &mut ModelParams) {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let rows = fwd.batch * fwd.len;

    let dz = linear_backward(&params.head, &mut grads.head, &fwd.z, dlogits, rows);
    let mut dx = layer_norm_backward(&params.ln_final, &mut grads.ln_final, &fwd.ln_final, &dz, d);

    for (l, blk) in params.blocks.iter().enumerate().rev() {
        let cache = &fwd.blocks[l];
        let gblk = &mut grads.blocks[l];

        let dg = linear_backward(&blk.ff_out, &mut gblk.ff_out, &cache.g, &dx, rows);
        let du: Vec<f64> = dg.iter().zip(&cache.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        let dc = linear_backward(&blk.ff_in, &mut gblk.ff_in, &cache.c, &du, rows);
        let dln = layer_norm_backward(&blk.ln_ff, &mut gblk.ln_ff, &cache.ln_ff, &dc, d);
        dx.iter_mut().zip(&dln).for_each(|(a, b)| *a += b);

        let datt = linear_backward(&blk.attn_out, &mut gblk.attn_out, &cache.att, &dx, rows);
        let dqkv = attention_backward(&cache.qkv, &cache.probs, &datt, fwd.batch, fwd.len, d, cfg.n_heads);
        let da = linear_backward(&blk.qkv, &mut gblk.qkv, &cache.a, &dqkv, rows);
        let dln = layer_norm_backward(&blk.ln_attn, &mut gblk.ln_attn, &cache.ln_attn, &da, d);
        dx.iter_mut().zip(&dln).for_each(|(a, b)| *a += b);
    }

    for (b, seq) in fwd.inputs.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let src = &dx[(b * fwd.len + t) * d..(b * fwd.len + t + 1) * d];
            grads.tok_emb.data[tok * d..(tok + 1) * d]
                .iter_mut()
                .zip(src)
                .for_each(|(g, s)| *g += s);
            grads.pos_emb.data[t * d..(t + 1) * d]
                .iter_mut()
                .zip(src)
                .for_each(|(g, s)| *g += s);
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_tokens(params: &ModelParams, tokens: &[usize]) -> Result<()> {
    let vocab = params.config.vocab_size;
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(t) => Err(GqeError::input(format!(
            "token {t} out of range for vocabulary {vocab}"
        ))),
        None => Ok(()),
    }
}

fn teacher_inputs(params: &ModelParams, seqs: &[CircuitSequence]) -> Result<Vec<Vec<usize>>> {
    let len = seqs.first().map_or(0, CircuitSequence::len);
    let max_len = params.config.max_len;
    let mut rows = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() || s.len() > max_len {
            return Err(GqeError::input(format!(
                "sequence length {} not in 1..={max_len}",
                s.len()
            )));
        }
        if s.len() != len {
            return Err(GqeError::input("sequences in a batch must share one length"));
        }
        check_tokens(params, &s.tokens)?;
        let mut row = Vec::with_capacity(len);
        row.push(params.config.bos());
        row.extend_from_slice(&s.tokens[..len - 1]);
        rows.push(row);
    }
    Ok(rows)
}

/// Log-probabilities of each sequence and, when `scales` is given, the
/// matching `dlogits` for `Σ_b scales[b]·log p(seq_b)`.
fn log_probs_and_dlogits(
    params: &ModelParams,
    seqs: &[CircuitSequence],
    fwd: &Forward,
    scales: Option<&[f64]>,
) -> (Vec<LogProbResult>, Vec<f64>) {
    let vocab = params.config.vocab_size;
    let mut dlogits = if scales.is_some() {
        vec![0.0; fwd.logits.len()]
    } else {
        Vec::new()
    };
    let results = seqs
        .iter()
        .enumerate()
        .map(|(b, seq)| {
            let per_token: Vec<f64> = seq
                .tokens
                .iter()
                .enumerate()
                .map(|(t, &tok)| {
                    let off = (b * fwd.len + t) * vocab;
                    let row = &fwd.logits[off..off + vocab];
                    let lse = log_sum_exp(row);
                    if let Some(scales) = scales {
                        let s = scales[b];
                        let drow = &mut dlogits[off..off + vocab];
                        for (k, (g, &l)) in drow.iter_mut().zip(row).enumerate() {
                            let p = (l - lse).exp();
                            *g = s * (f64::from(u8::from(k == tok)) - p);
                        }
                    }
                    row[tok] - lse
                })
                .collect();
            LogProbResult {
                total: per_token.iter().sum(),
                per_token,
            }
        })
        .collect();
    (results, dlogits)
}

/// Log-probabilities of equal-length sequences in one batched pass.
pub fn batch_log_probs(params: &ModelParams, seqs: &[CircuitSequence]) -> Result<Vec<LogProbResult>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = teacher_inputs(params, seqs)?;
    let fwd = forward(params, &inputs);
    Ok(log_probs_and_dlogits(params, seqs, &fwd, None).0)
}

pub fn sequence_log_prob(params: &ModelParams, seq: &CircuitSequence) -> Result<LogProbResult> {
    Ok(batch_log_probs(params, std::slice::from_ref(seq))?.remove(0))
}

/// Log-probabilities of `seqs`, accumulating `Σ_b scales[b]·∇log p(seq_b)`
/// into `grads`.
pub fn batch_log_probs_with_grad(
    params: &ModelParams,
    seqs: &[CircuitSequence],
    scales: &[f64],
    grads: &mut ModelParams,
) -> Result<Vec<LogProbResult>> {
    if seqs.len() != scales.len() {
        return Err(GqeError::input("one gradient scale per sequence required"));
    }
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = teacher_inputs(params, seqs)?;
    let fwd = forward(params, &inputs);
    let (results, dlogits) = log_probs_and_dlogits(params, seqs, &fwd, Some(scales));
    backward(params, &fwd, &dlogits, grads);
    Ok(results)
}

/// One forward pass: computes log-probabilities, asks `scales_for` for the
/// per-sequence gradient weights, then backpropagates
/// `Σ_b scale_b·∇log p(seq_b)` into `grads`.
pub(crate) fn log_probs_then_grad(
    params: &ModelParams,
    seqs: &[CircuitSequence],
    grads: &mut ModelParams,
    scales_for: impl FnOnce(&[LogProbResult]) -> Result<Vec<f64>>,
) -> Result<Vec<LogProbResult>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = teacher_inputs(params, seqs)?;
    let fwd = forward(params, &inputs);
    let (results, _) = log_probs_and_dlogits(params, seqs, &fwd, None);
    let scales = scales_for(&results)?;
    if scales.len() != seqs.len() {
        return Err(GqeError::input("one gradient scale per sequence required"));
    }
    let (_, dlogits) = log_probs_and_dlogits(params, seqs, &fwd, Some(&scales));
    backward(params, &fwd, &dlogits, grads);
    Ok(results)
}

/// Single-sequence form of [`batch_log_probs_with_grad`].
pub fn sequence_log_prob_with_grad(
    params: &ModelParams,
    seq: &CircuitSequence,
    scale: f64,
    grads: &mut ModelParams,
) -> Result<LogProbResult> {
    Ok(batch_log_probs_with_grad(params, std::slice::from_ref(seq), &[scale], grads)?.remove(0))
}

/// Logits for every position given `prefix`: row `k` is the distribution
/// of the token following `prefix[..k]`.
pub fn position_logits(params: &ModelParams, prefix: &[usize]) -> Result<Vec<Vec<f64>>> {
    if prefix.len() >= params.config.max_len {
        return Err(GqeError::input(format!(
            "prefix length {} must be below max_len {}",
            prefix.len(),
            params.config.max_len
        )));
    }
    check_tokens(params, prefix)?;
    let mut row = vec![params.config.bos()];
    row.extend_from_slice(prefix);
    let fwd = forward(params, &[row]);
    Ok(fwd
        .logits
        .chunks_exact(params.config.vocab_size)
        .map(<[f64]>::to_vec)
        .collect())
}

/// Logits of the token following `prefix`.
pub fn next_token_logits(params: &ModelParams, prefix: &[usize]) -> Result<Vec<f64>> {
    Ok(position_logits(params, prefix)?.pop().expect("at least the BOS row"))
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, ModelConfig};
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            max_len: 5,
            embed_dim: 8,
            ff_dim: 12,
            n_heads: 2,
            n_layers: 2,
            use_bias: true,
            dropout: 0.0,
        }
    }

    fn scaled_model(seed: u64, factor: f64) -> ModelParams {
        let mut p = init_model(&cfg(), seed).unwrap();
        let flat: Vec<f64> = p.flatten().iter().map(|v| v * factor).collect();
        p.assign_flat(&flat).unwrap();
        p
    }

    #[test]
    fn logits_shape_and_bounds() {
        let p = init_model(&cfg(), 3).unwrap();
        let l = next_token_logits(&p, &[]).unwrap();
        assert_eq!(l.len(), 6);
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(next_token_logits(&p, &[1, 2, 3, 4, 5]).is_err());
        assert!(next_token_logits(&p, &[6]).is_err());
    }

    #[test]
    fn causality() {
        let p = scaled_model(4, 20.0);
        let long = position_logits(&p, &[3, 1, 4, 1]).unwrap();
        for k in 0..4 {
            let short = next_token_logits(&p, &[3, 1, 4, 1][..k]).unwrap();
            for (a, b) in short.iter().zip(&long[k]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_head_gives_uniform_log_prob() {
        let mut p = init_model(&cfg(), 5).unwrap();
        p.head.weight.data.fill(0.0);
        let seq = CircuitSequence::new(vec![1, 0, 5, 2, 2]);
        let lp = sequence_log_prob(&p, &seq).unwrap();
        assert!((lp.total - 5.0 * (1.0f64 / 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_matches_product_of_step_softmaxes() {
        let p = scaled_model(6, 25.0);
        let seq = CircuitSequence::new(vec![2, 5, 0, 3, 1]);
        let lp = sequence_log_prob(&p, &seq).unwrap();
        let mut prob = 1.0;
        for k in 0..seq.len() {
            let l = next_token_logits(&p, &seq.tokens[..k]).unwrap();
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            prob *= l[seq.tokens[k]].exp() / z;
        }
        assert!((lp.total.exp() / prob - 1.0).abs() < 1e-9);
        assert!((lp.total - lp.per_token.iter().sum::<f64>()).abs() < 1e-9);
        assert!(lp.per_token.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn batched_and_single_log_probs_agree() {
        let p = scaled_model(7, 10.0);
        let seqs = vec![
            CircuitSequence::new(vec![1, 2, 3]),
            CircuitSequence::new(vec![0, 0, 5]),
            CircuitSequence::new(vec![4, 2, 1]),
        ];
        let batched = batch_log_probs(&p, &seqs).unwrap();
        for (s, b) in seqs.iter().zip(&batched) {
            assert!((sequence_log_prob(&p, s).unwrap().total - b.total).abs() < 1e-12);
        }
        let ragged = vec![CircuitSequence::new(vec![1]), CircuitSequence::new(vec![1, 2])];
        assert!(batch_log_probs(&p, &ragged).is_err());
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let p = scaled_model(8, 5.0);
        let seqs = vec![
            CircuitSequence::new(vec![1, 4, 2, 0]),
            CircuitSequence::new(vec![5, 5, 3, 1]),
        ];
        let scales = [0.7, -1.3];
        let mut grads = p.zeros_like();
        batch_log_probs_with_grad(&p, &seqs, &scales, &mut grads).unwrap();
        let analytic = grads.flatten();
        let objective = |q: &ModelParams| -> f64 {
            batch_log_probs(q, &seqs)
                .unwrap()
                .iter()
                .zip(scales)
                .map(|(r, s)| s * r.total)
                .sum()
        };
        let base = p.flatten();
        let mut q = p.clone();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] += h;
            q.assign_flat(&v).unwrap();
            let up = objective(&q);
            v[i] -= 2.0 * h;
            q.assign_flat(&v).unwrap();
            let down = objective(&q);
            let fd = (up - down) / (2.0 * h);
            // Absolute below magnitude 1: tiny entries are dominated by rounding.
            let scale = analytic[i].abs().max(fd.abs()).max(1.0);
            worst = worst.max((fd - analytic[i]).abs() / scale);
        }
        assert!(worst < 1e-6, "max error {worst}");
    }
}
