//! Temperature-scaled autoregressive sampling with a per-layer key/value cache.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::layers::{gelu, layer_norm_forward, linear_forward};
use super::ModelParams;
use crate::error::{GqeError, Result};
use crate::pool::CircuitSequence;

/// `softmax(logits / temperature)`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Draws `count` sequences of length `max_len`. No gradients are tracked;
/// the random stream is consumed position-major, sequence-minor.
pub fn sample_sequences<R: Rng + ?Sized>(
    params: &ModelParams,
    count: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<CircuitSequence>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(GqeError::input(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let cfg = &params.config;
    let (d, n, heads) = (cfg.embed_dim, cfg.max_len, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let vocab = cfg.vocab_size;

    let mut caches: Vec<KvCache> = params
        .blocks
        .iter()
        .map(|_| KvCache {
            keys: vec![0.0; count * n * d],
            values: vec![0.0; count * n * d],
        })
        .collect();
    let mut tokens = vec![Vec::with_capacity(n); count];
    let mut scores = vec![0.0; n];

    for t in 0..n {
        let mut x = vec![0.0; count * d];
        for b in 0..count {
            let tok = if t == 0 { cfg.bos() } else { tokens[b][t - 1] };
            let te = &params.tok_emb.data[tok * d..(tok + 1) * d];
            let pe = &params.pos_emb.data[t * d..(t + 1) * d];
            for c in 0..d {
                x[b * d + c] = te[c] + pe[c];
            }
        }

        for (blk, cache) in params.blocks.iter().zip(caches.iter_mut()) {
            let (a, _) = layer_norm_forward(&blk.ln_attn, &x, d);
            let qkv = linear_forward(&blk.qkv, &a, count);
            let mut att = vec![0.0; count * d];
            for b in 0..count {
                let slot = (b * n + t) * d;
                cache.keys[slot..slot + d].copy_from_slice(&qkv[b * 3 * d + d..b * 3 * d + 2 * d]);
                cache.values[slot..slot + d].copy_from_slice(&qkv[b * 3 * d + 2 * d..b * 3 * d + 3 * d]);
                for h in 0..heads {
                    let q = &qkv[b * 3 * d + h * dh..b * 3 * d + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(t + 1) {
                        let ko = (b * n + j) * d + h * dh;
                        *s = scale * q.iter().zip(&cache.keys[ko..ko + dh]).map(|(x, y)| x * y).sum::<f64>();
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut().take(t + 1) {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let out = &mut att[b * d + h * dh..b * d + (h + 1) * dh];
                    for (j, s) in scores.iter().enumerate().take(t + 1) {
                        let vo = (b * n + j) * d + h * dh;
                        let w = s / sum;
                        out.iter_mut()
                            .zip(&cache.values[vo..vo + dh])
                            .for_each(|(o, v)| *o += w * v);
                    }
                }
            }
            let proj = linear_forward(&blk.attn_out, &att, count);
            x.iter_mut().zip(&proj).for_each(|(xi, p)| *xi += p);

            let (c, _) = layer_norm_forward(&blk.ln_ff, &x, d);
            let g: Vec<f64> = linear_forward(&blk.ff_in, &c, count).into_iter().map(gelu).collect();
            let f = linear_forward(&blk.ff_out, &g, count);
            x.iter_mut().zip(&f).for_each(|(xi, p)| *xi += p);
        }

        let (z, _) = layer_norm_forward(&params.ln_final, &x, d);
        let logits = linear_forward(&params.head, &z, count);
        for (b, row) in logits.chunks_exact(vocab).enumerate() {
            let probs = softmax_with_temperature(row, temperature);
            let dist = WeightedIndex::new(&probs)
                .map_err(|e| GqeError::Numeric(format!("invalid sampling distribution: {e}")))?;
            tokens[b].push(dist.sample(rng));
        }
    }
    Ok(tokens.into_iter().map(CircuitSequence::new).collect())
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, next_token_logits, ModelConfig};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(vocab: usize, len: usize, seed: u64, factor: f64) -> ModelParams {
        model_with_bias(vocab, len, seed, factor, false)
    }

    fn model_with_bias(vocab: usize, len: usize, seed: u64, factor: f64, use_bias: bool) -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: vocab,
            max_len: len,
            embed_dim: 8,
            ff_dim: 16,
            n_heads: 2,
            n_layers: 2,
            use_bias,
            dropout: 0.0,
        };
        let mut p = init_model(&cfg, seed).unwrap();
        let flat: Vec<f64> = p.flatten().iter().map(|v| v * factor).collect();
        p.assign_flat(&flat).unwrap();
        p
    }

    #[test]
    fn empirical_frequencies_match_softmax() {
        // Frozen logits: zero head weights, hand-set head bias.
        let mut p = model_with_bias(3, 1, 11, 1.0, true);
        p.head.weight.data.fill(0.0);
        p.head.bias.as_mut().unwrap().data = vec![0.5, -0.3, 1.0];
        assert_eq!(next_token_logits(&p, &[]).unwrap(), vec![0.5, -0.3, 1.0]);
        let z = 0.5f64.exp() + (-0.3f64).exp() + 1.0f64.exp();
        let probs = [0.5f64.exp() / z, (-0.3f64).exp() / z, 1.0f64.exp() / z];
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        for s in sample_sequences(&p, draws, 1.0, &mut rng).unwrap() {
            counts[s.tokens[0]] += 1;
        }
        for k in 0..3 {
            let sigma = (draws as f64 * probs[k] * (1.0 - probs[k])).sqrt();
            let diff = (counts[k] as f64 - draws as f64 * probs[k]).abs();
            assert!(
                diff < 3.0 * sigma,
                "token {k}: {} vs {}",
                counts[k],
                draws as f64 * probs[k]
            );
        }
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let p = model(3, 1, 12, 40.0);
        let draws = 60_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 3];
        for s in sample_sequences(&p, draws, 1e6, &mut rng).unwrap() {
            counts[s.tokens[0]] += 1;
        }
        let expected = draws as f64 / 3.0;
        let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn same_seed_same_sequences() {
        let p = model(7, 6, 13, 5.0);
        let a = sample_sequences(&p, 10, 1.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_sequences(&p, 10, 1.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.len() == 6 && s.tokens.iter().all(|&t| t < 7)));
        assert!(sample_sequences(&p, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn cached_decoding_matches_full_forward_greedy() {
        let p = model(9, 7, 14, 30.0);
        let sampled = sample_sequences(&p, 1, 1e-6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut greedy = Vec::new();
        for _ in 0..7 {
            let l = next_token_logits(&p, &greedy).unwrap();
            let best = (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
            greedy.push(best);
        }
        assert_eq!(sampled[0].tokens, greedy);
    }

    #[test]
    fn softmax_normalizes_and_sharpens_with_lower_temperature() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let mut last_max = 0.0;
        for t in [5.0, 2.0, 1.0, 0.5, 0.1] {
            let p = softmax_with_temperature(&logits, t);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let max = p.iter().copied().fold(0.0, f64::max);
            assert!(max > last_max);
            last_max = max;
        }
    }
}
