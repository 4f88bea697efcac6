//! Decoder-only transformer over operator-pool tokens.
//!
//! Pre-norm blocks (layer norm → causal multi-head attention → residual,
//! layer norm → GELU feed-forward → residual), learned absolute position
//! embeddings, a final layer norm and an untied output head. Everything is
//! `f64`, and gradients are computed by explicit backpropagation so that a
//! finite-difference check can resolve them tightly.
//!
//! The input at position 0 is a dedicated begin-of-sequence embedding (row
//! `vocab_size` of the token table); it is never produced as an output.

pub mod checkpoint;
mod forward;
mod layers;
mod sample;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GqeError, Result};

pub(crate) use forward::log_probs_then_grad;
pub use forward::{
    batch_log_probs, batch_log_probs_with_grad, next_token_logits, position_logits, sequence_log_prob,
    sequence_log_prob_with_grad, LogProbResult,
};
pub use sample::{sample_sequences, softmax_with_temperature};

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output vocabulary, equal to the pool size `L`.
    pub vocab_size: usize,
    /// Sequence length `N`.
    pub max_len: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub use_bias: bool,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small model used for desk-scale runs.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_len,
            embed_dim: 64,
            ff_dim: 256,
            n_heads: 4,
            n_layers: 2,
            use_bias: false,
            dropout: 0.0,
        }
    }

    /// GPT-2-small shaped model (768 / 3072 / 12 heads / 12 layers).
    pub fn paper_scale(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            embed_dim: 768,
            ff_dim: 3072,
            n_heads: 12,
            n_layers: 12,
            ..Self::desk(vocab_size, max_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("embed_dim", self.embed_dim),
            ("ff_dim", self.ff_dim),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(GqeError::input(format!("model {name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(GqeError::input(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GqeError::input(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Index of the begin-of-sequence row in the token embedding.
    pub fn bos(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub offset: Option<Tensor>,
}

/// `y = x·W + b` with `W` stored `(in, out)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    fn new(n_in: usize, n_out: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[n_in, n_out]),
            bias: bias.then(|| Tensor::zeros(&[n_out])),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape[1]
    }
}

impl LayerNorm {
    fn new(dim: usize, bias: bool) -> Self {
        LayerNorm {
            gain: Tensor::filled(&[dim], 1.0),
            offset: bias.then(|| Tensor::zeros(&[dim])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// All trainable tensors plus the configuration. The same type holds
/// gradients (see [`ModelParams::zeros_like`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub head: Linear,
}

type Named<'a> = Vec<(String, &'a Tensor)>;
type NamedMut<'a> = Vec<(String, &'a mut Tensor)>;

impl Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Named<'a>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

impl LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Named<'a>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        if let Some(b) = &self.offset {
            out.push((format!("{prefix}.offset"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a>) {
        out.push((format!("{prefix}.gain"), &mut self.gain));
        if let Some(b) = &mut self.offset {
            out.push((format!("{prefix}.offset"), b));
        }
    }
}

impl Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Named<'a>) {
        self.ln_attn.collect(&format!("{prefix}.ln_attn"), out);
        self.qkv.collect(&format!("{prefix}.qkv"), out);
        self.attn_out.collect(&format!("{prefix}.attn_out"), out);
        self.ln_ff.collect(&format!("{prefix}.ln_ff"), out);
        self.ff_in.collect(&format!("{prefix}.ff_in"), out);
        self.ff_out.collect(&format!("{prefix}.ff_out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a>) {
        self.ln_attn.collect_mut(&format!("{prefix}.ln_attn"), out);
        self.qkv.collect_mut(&format!("{prefix}.qkv"), out);
        self.attn_out.collect_mut(&format!("{prefix}.attn_out"), out);
        self.ln_ff.collect_mut(&format!("{prefix}.ln_ff"), out);
        self.ff_in.collect_mut(&format!("{prefix}.ff_in"), out);
        self.ff_out.collect_mut(&format!("{prefix}.ff_out"), out);
    }
}

impl ModelParams {
    /// Zero-initialized parameters with the layout implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let bias = config.use_bias;
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln_attn: LayerNorm::new(d, bias),
                qkv: Linear::new(d, 3 * d, bias),
                attn_out: Linear::new(d, d, bias),
                ln_ff: LayerNorm::new(d, bias),
                ff_in: Linear::new(d, config.ff_dim, bias),
                ff_out: Linear::new(config.ff_dim, d, bias),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[config.vocab_size + 1, d]),
            pos_emb: Tensor::zeros(&[config.max_len, d]),
            blocks,
            ln_final: LayerNorm::new(d, bias),
            head: Linear::new(d, config.vocab_size, bias),
        })
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.data.fill(0.0));
        z
    }

    /// Every tensor with its dotted name, in a fixed visiting order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}"), &mut out);
        }
        self.ln_final.collect("ln_final", &mut out);
        self.head.collect("head", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("blocks.{i}"), &mut out);
        }
        self.ln_final.collect_mut("ln_final", &mut out);
        self.head.collect_mut("head", &mut out);
        out
    }

    fn for_each_tensor(&self, mut f: impl FnMut(String, &Tensor)) {
        self.named_tensors().into_iter().for_each(|(n, t)| f(n, t));
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        self.named_tensors_mut().into_iter().for_each(|(n, t)| f(n, t));
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// All values in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each_tensor(|_, t| out.extend_from_slice(&t.data));
        out
    }

    /// Overwrites all values from `flat` (visiting order).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(GqeError::input(format!(
                "expected {} values, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.for_each_tensor_mut(|_, t| {
            let n = t.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Deterministic random initialization: weights and embeddings from
/// `N(0, 0.02²)`, layer-norm gains one, offsets and biases zero.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    params.for_each_tensor_mut(|name, t| {
        let is_weight = name.ends_with("weight") || name.ends_with("_emb");
        if is_weight {
            t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    });
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            max_len: 4,
            embed_dim: 8,
            ff_dim: 16,
            n_heads: 2,
            n_layers: 2,
            use_bias: true,
            dropout: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(&tiny(), 7).unwrap();
        assert_eq!(a, init_model(&tiny(), 7).unwrap());
        assert_ne!(a.flatten(), init_model(&tiny(), 8).unwrap().flatten());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.embed_dim = 6;
        c.n_heads = 4;
        assert!(matches!(init_model(&c, 0), Err(GqeError::Input(_))));
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.max_len = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_layout_and_values() {
        let p = init_model(&tiny(), 1).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "tok_emb");
        assert!(names.contains(&"blocks.1.ff_out.bias".to_string()));
        assert_eq!(p.tok_emb.shape, vec![6, 8]);
        assert!(p.ln_final.gain.data.iter().all(|&g| g == 1.0));
        assert!(p.head.bias.as_ref().unwrap().data.iter().all(|&b| b == 0.0));
        let flat = p.flatten();
        assert_eq!(flat.len(), p.n_params());
        let mut q = p.zeros_like();
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);

        let mut no_bias = tiny();
        no_bias.use_bias = false;
        let p = init_model(&no_bias, 1).unwrap();
        assert!(p
            .named_tensors()
            .iter()
            .all(|(n, _)| !n.ends_with("bias") && !n.ends_with("offset")));
    }
}
