//! Bounded replay store for the hybrid online/offline update.
//!
//! Every online batch is stored; when the store exceeds its capacity the
//! highest-energy samples are evicted first (ties: oldest `created_step`
//! first, then earliest inserted). From step `S` on, each update also draws
//! `R` stored samples uniformly without replacement. Within a step the draw
//! happens before the online batch is stored, so a sample never appears
//! twice in one update.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GqeError, Result};
use crate::pool::CircuitSequence;

/// A generated circuit with its energy and cached reference log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub sequence: CircuitSequence,
    pub energy: f64,
    pub created_step: usize,
    /// `log p_ref(sequence)`, fixed for the whole run.
    pub ref_logp: f64,
}

/// Replay setting; the default is disabled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    pub capacity: usize,
    pub reuse: usize,
    pub start: usize,
    pub enabled: bool,
}

impl HybridConfig {
    pub fn new(capacity: usize, reuse: usize, start: usize) -> Result<Self> {
        let cfg = HybridConfig {
            capacity,
            reuse,
            start,
            enabled: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.reuse > self.capacity {
            return Err(GqeError::input(format!(
                "reuse R={} exceeds capacity C={}",
                self.reuse, self.capacity
            )));
        }
        Ok(())
    }

    /// Parses `C=25,R=2,S=50` (keys case-insensitive, any order, all required).
    pub fn parse(spec: &str) -> Result<Self> {
        let (mut c, mut r, mut s) = (None, None, None);
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| GqeError::input(format!("expected KEY=VALUE in {part:?}")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| GqeError::input(format!("invalid integer in {part:?}")))?;
            let slot = match key.trim().to_ascii_uppercase().as_str() {
                "C" => &mut c,
                "R" => &mut r,
                "S" => &mut s,
                other => return Err(GqeError::input(format!("unknown hybrid key {other:?}"))),
            };
            *slot = Some(value);
        }
        match (c, r, s) {
            (Some(c), Some(r), Some(s)) => Self::new(c, r, s),
            _ => Err(GqeError::input(format!("hybrid spec {spec:?} needs C, R and S"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    samples: Vec<EnergySample>,
    config: HybridConfig,
}

impl ReplayBuffer {
    pub fn new(config: HybridConfig) -> Result<Self> {
        config.validate()?;
        Ok(ReplayBuffer {
            samples: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &HybridConfig {
        &self.config
    }

    pub fn samples(&self) -> &[EnergySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn min_energy(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.energy).min_by(f64::total_cmp)
    }

    /// Appends `batch`, then evicts down to capacity. Returns the evicted
    /// samples in eviction order.
    pub fn store(&mut self, batch: &[EnergySample]) -> Vec<EnergySample> {
        self.samples.extend_from_slice(batch);
        let mut evicted = Vec::new();
        while self.samples.len() > self.config.capacity {
            let worst = self
                .samples
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| {
                    a.energy
                        .total_cmp(&b.energy)
                        .then(b.created_step.cmp(&a.created_step))
                        .then(ib.cmp(ia))
                })
                .map(|(i, _)| i)
                .expect("non-empty while over capacity");
            evicted.push(self.samples.remove(worst));
        }
        evicted
    }

    /// Up to `count` distinct stored samples, uniformly without replacement.
    pub fn draw<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<EnergySample> {
        let amount = count.min(self.samples.len());
        rand::seq::index::sample(rng, self.samples.len(), amount)
            .into_iter()
            .map(|i| self.samples[i].clone())
            .collect()
    }

    /// Samples for the step-`t` update: the online batch, plus `R` replayed
    /// samples once `t ≥ S` (when enabled). The online batch is stored after
    /// the draw in every case.
    pub fn assemble_step<R: Rng + ?Sized>(
        &mut self,
        online: &[EnergySample],
        t: usize,
        rng: &mut R,
    ) -> Vec<EnergySample> {
        let mut out = online.to_vec();
        if self.config.enabled && t >= self.config.start {
            out.extend(self.draw(self.config.reuse, rng));
        }
        self.store(online);
        out
    }

    /// One JSON object per line: `{"tokens": [...], "energy": e, "created_step": s}`.
    pub fn dump_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            tokens: &'a [usize],
            energy: f64,
            created_step: usize,
        }
        let path = path.as_ref();
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(&Line {
                tokens: &s.sequence.tokens,
                energy: s.energy,
                created_step: s.created_step,
            })?);
            out.push('\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| GqeError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(energy: f64, step: usize, tag: usize) -> EnergySample {
        EnergySample {
            sequence: CircuitSequence::new(vec![tag]),
            energy,
            created_step: step,
            ref_logp: -1.0,
        }
    }

    fn energies(b: &ReplayBuffer) -> Vec<f64> {
        let mut e: Vec<f64> = b.samples().iter().map(|s| s.energy).collect();
        e.sort_by(f64::total_cmp);
        e
    }

    #[test]
    fn store_evicts_highest_energy() {
        let mut b = ReplayBuffer::new(HybridConfig::new(2, 1, 0).unwrap()).unwrap();
        let evicted = b.store(&[sample(-1.0, 0, 0), sample(-0.5, 0, 1), sample(-0.9, 0, 2)]);
        assert_eq!(energies(&b), vec![-1.0, -0.9]);
        assert_eq!(evicted[0].energy, -0.5);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut b = ReplayBuffer::new(HybridConfig::new(0, 0, 0).unwrap()).unwrap();
        b.store(&[sample(-1.0, 0, 0), sample(-2.0, 1, 1)]);
        assert!(b.is_empty());
    }

    #[test]
    fn equal_energy_ties_keep_the_newer_sample() {
        let mut b = ReplayBuffer::new(HybridConfig::new(1, 1, 0).unwrap()).unwrap();
        b.store(&[sample(-1.0, 3, 7)]);
        b.store(&[sample(-1.0, 4, 8)]);
        assert_eq!(b.samples(), &[sample(-1.0, 4, 8)]);
        b.store(&[sample(-1.0, 5, 9), sample(-1.0, 5, 10)]);
        assert_eq!(b.samples(), &[sample(-1.0, 5, 10)]);
    }

    #[test]
    fn draw_is_distinct_bounded_and_deterministic() {
        let mut b = ReplayBuffer::new(HybridConfig::new(5, 2, 0).unwrap()).unwrap();
        b.store(&(0..5).map(|i| sample(-(i as f64), 0, i)).collect::<Vec<_>>());
        let d = b.draw(2, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(d.len(), 2);
        assert_ne!(d[0], d[1]);
        assert_eq!(d, b.draw(2, &mut ChaCha8Rng::seed_from_u64(4)));

        let mut single = ReplayBuffer::new(HybridConfig::new(4, 4, 0).unwrap()).unwrap();
        single.store(&[sample(-1.0, 0, 0)]);
        assert_eq!(single.draw(4, &mut ChaCha8Rng::seed_from_u64(0)).len(), 1);
    }

    #[test]
    fn assemble_before_and_after_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(HybridConfig::new(25, 2, 3).unwrap()).unwrap();
        let online = |t: usize| {
            (0..10)
                .map(|i| sample(-(i as f64) - t as f64, t, i))
                .collect::<Vec<_>>()
        };
        for t in 0..3 {
            let out = b.assemble_step(&online(t), t, &mut rng);
            assert_eq!(out.len(), 10);
        }
        assert_eq!(b.len(), 25);
        let out = b.assemble_step(&online(3), 3, &mut rng);
        assert_eq!(out.len(), 12);
        assert!(out[10..].iter().all(|s| s.created_step < 3), "drawn before storing");

        let mut off = ReplayBuffer::new(HybridConfig::default()).unwrap();
        for t in 0..5 {
            assert_eq!(off.assemble_step(&online(t), t, &mut rng).len(), 10);
        }
    }

    #[test]
    fn parses_hybrid_spec() {
        assert_eq!(
            HybridConfig::parse("C=25,R=2,S=50").unwrap(),
            HybridConfig::new(25, 2, 50).unwrap()
        );
        assert_eq!(
            HybridConfig::parse(" s=1, c=4 ,r=4").unwrap(),
            HybridConfig::new(4, 4, 1).unwrap()
        );
        assert!(HybridConfig::parse("C=2,R=3,S=0").is_err());
        assert!(HybridConfig::parse("C=2,R=1").is_err());
        assert!(HybridConfig::parse("C=2,R=1,S=x").is_err());
        assert!(HybridConfig::parse("C=2,R=1,S=0,Q=1").is_err());
    }

    #[test]
    fn dump_writes_one_line_per_sample() {
        let mut b = ReplayBuffer::new(HybridConfig::new(3, 1, 0).unwrap()).unwrap();
        b.store(&[sample(-1.5, 2, 4), sample(-0.5, 3, 1)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.jsonl");
        b.dump_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], r#"{"tokens":[4],"energy":-1.5,"created_step":2}"#);
    }
}
