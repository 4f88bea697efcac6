//! AdamW: Adam moments with weight decay applied directly to the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{GqeError, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(GqeError::input(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of `params` from `grads` (same layout).
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if params.n_params() != self.m.len() || grads.n_params() != self.m.len() {
            return Err(GqeError::input("optimizer state does not match the parameter count"));
        }
        let c = self.config;
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        let grad_tensors = grads.named_tensors();
        let mut offset = 0;
        for ((_, p), (_, g)) in params.named_tensors_mut().into_iter().zip(grad_tensors) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for (((pi, gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *pi *= decay;
                *pi -= c.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
            offset += p.len();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 3,
            max_len: 2,
            embed_dim: 2,
            ff_dim: 4,
            n_heads: 1,
            n_layers: 1,
            use_bias: false,
            dropout: 0.0,
        };
        init_model(&cfg, 1).unwrap()
    }

    #[test]
    fn matches_scalar_reference_over_several_steps() {
        let mut p = tiny();
        let n = p.n_params();
        let mut opt = AdamW::new(AdamWConfig::new(1e-2, 0.1), n).unwrap();
        let mut reference = p.flatten();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        for t in 1..=4 {
            let g_flat: Vec<f64> = (0..n).map(|i| ((i * 7 + t) % 11) as f64 - 5.0).collect();
            let mut g = p.zeros_like();
            g.assign_flat(&g_flat).unwrap();
            opt.step(&mut p, &g).unwrap();
            for i in 0..n {
                m[i] = 0.9 * m[i] + 0.1 * g_flat[i];
                v[i] = 0.999 * v[i] + 0.001 * g_flat[i] * g_flat[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
                reference[i] = reference[i] * (1.0 - 1e-3) - 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in p.flatten().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn first_step_moves_each_coordinate_by_about_lr() {
        let mut p = tiny();
        let before = p.flatten();
        let mut g = p.zeros_like();
        g.assign_flat(&vec![3.0; p.n_params()]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 0.0), p.n_params()).unwrap();
        opt.step(&mut p, &g).unwrap();
        for (a, b) in p.flatten().iter().zip(&before) {
            assert!((b - a - 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_settings_and_shapes() {
        assert!(AdamW::new(AdamWConfig::new(0.0, 0.01), 3).is_err());
        assert!(AdamW::new(AdamWConfig::new(1e-3, -1.0), 3).is_err());
        let mut p = tiny();
        let g = p.zeros_like();
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 0.0), 3).unwrap();
        assert!(opt.step(&mut p, &g).is_err());
    }
}
