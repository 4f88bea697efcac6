//! Training loop: sample, evaluate, replay, pair, update, log.
//!
//! Each run derives three independent random streams from its seed: model
//! initialization, sequence sampling and replay draws. The reference model
//! is a frozen copy of the initial parameters, and its log-probability of a
//! sequence is computed once, when the sequence is generated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GqeError, Result};
use crate::hamiltonian::Hamiltonian;
use crate::loss::{batch_loss, batch_loss_and_grad, pair_best_vs_others, LossConfig, PreferenceBatch};
use crate::model::{batch_log_probs, init_model, sample_sequences, ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::pool::{default_angle_set, evaluate_sequence, CircuitSequence, OperatorPool};
use crate::replay::{EnergySample, HybridConfig, ReplayBuffer};

/// Exact CSV header of a run log.
pub const CSV_HEADER: &str = "step,temperature,batch_min_energy,min_energy_so_far,loss,n_pairs,buffer_size";

/// Seeds of the five-run protocol.
pub const PROTOCOL_SEEDS: [u64; 5] = [42, 123, 777, 2024, 9999];

const SAMPLING_STREAM: u64 = 1;
const REPLAY_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_initial: f64,
    pub t_final: f64,
    pub n_steps: usize,
}

impl ScheduleConfig {
    pub fn new(t_initial: f64, t_final: f64, n_steps: usize) -> Self {
        ScheduleConfig {
            t_initial,
            t_final,
            n_steps,
        }
    }

    /// 1.5 → 0.7 over 3000 steps.
    pub fn paper() -> Self {
        Self::new(1.5, 0.7, 3000)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |t: f64| t > 0.0 && t.is_finite();
        if !positive(self.t_initial) || !positive(self.t_final) {
            return Err(GqeError::input(format!(
                "temperatures must be positive, got {} and {}",
                self.t_initial, self.t_final
            )));
        }
        if self.n_steps == 0 {
            return Err(GqeError::input("n_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Linear interpolation from `t_initial` at step 0 to `t_final` at the last step.
/// A one-step schedule stays at `t_initial`.
pub fn temperature(t: usize, sched: &ScheduleConfig) -> Result<f64> {
    if t >= sched.n_steps {
        return Err(GqeError::input(format!(
            "step {t} outside schedule of {} steps",
            sched.n_steps
        )));
    }
    if sched.n_steps == 1 {
        return Ok(sched.t_initial);
    }
    let frac = t as f64 / (sched.n_steps - 1) as f64;
    Ok(sched.t_initial - (sched.t_initial - sched.t_final) * frac)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebugConfig {
    /// Emit only the identity token; every circuit is then the HF state.
    #[serde(default)]
    pub force_identity: bool,
    /// Recompute cached energies and reference log-probs of replayed samples
    /// and fail on any mismatch.
    #[serde(default)]
    pub recheck_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub hybrid: HybridConfig,
    pub schedule: ScheduleConfig,
    /// Circuits generated per step, `M`.
    pub samples_per_step: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hamiltonian_path: PathBuf,
    pub output_path: PathBuf,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub debug: DebugConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: small model, `N = 12`, `M = 10`, 300 steps,
    /// P-DPO with `α = 0.5`, `β = 0.1`.
    pub fn desk(hamiltonian_path: impl Into<PathBuf>, pool_size: usize) -> Self {
        TrainConfig {
            model: ModelConfig::desk(pool_size, 12),
            loss: LossConfig::pdpo(0.1, 0.5),
            hybrid: HybridConfig::default(),
            schedule: ScheduleConfig::new(1.5, 0.7, 300),
            samples_per_step: 10,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 42,
            hamiltonian_path: hamiltonian_path.into(),
            output_path: PathBuf::from("run.csv"),
            grad_clip: None,
            debug: DebugConfig::default(),
        }
    }

    /// The full-size setting: 768-wide 12-layer model, `N = 40`, 3000 steps, lr 8e-5.
    pub fn paper_scale(hamiltonian_path: impl Into<PathBuf>, pool_size: usize) -> Self {
        TrainConfig {
            model: ModelConfig::paper_scale(pool_size, 40),
            schedule: ScheduleConfig::paper(),
            learning_rate: 8e-5,
            ..Self::desk(hamiltonian_path, pool_size)
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| GqeError::input(format!("invalid config: {e}")))
    }

    pub fn load_toml(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GqeError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GqeError::input(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.dropout != 0.0 {
            return Err(GqeError::input("dropout is not supported during training; set it to 0"));
        }
        self.loss.validate()?;
        self.hybrid.validate()?;
        self.schedule.validate()?;
        if self.samples_per_step < 2 {
            return Err(GqeError::input(format!(
                "samples_per_step must be at least 2, got {}",
                self.samples_per_step
            )));
        }
        AdamWConfig::new(self.learning_rate, self.weight_decay).validate()?;
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(GqeError::input(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, lowercase hex.
    pub fn config_digest(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&json)
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub temperature: f64,
    /// Lowest energy among this step's freshly generated circuits.
    pub batch_min_energy: f64,
    pub min_energy_so_far: f64,
    /// Absent when the step was skipped for lack of pairs.
    pub loss: Option<f64>,
    pub n_pairs: usize,
    pub buffer_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_energy: f64,
    pub best_sequence: Vec<usize>,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    pub wall_time_seconds: f64,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.temperature, r.batch_min_energy, r.min_energy_so_far, loss, r.n_pairs, r.buffer_size
            );
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes the CSV to `csv_path` and the summary next to it
    /// (`run.csv` → `run.summary.json`).
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<PathBuf> {
        let csv_path = csv_path.as_ref();
        std::fs::write(csv_path, self.to_csv()).map_err(|e| GqeError::io(csv_path, e))?;
        let summary_path = summary_path_for(csv_path);
        std::fs::write(&summary_path, self.summary_json()? + "\n").map_err(|e| GqeError::io(&summary_path, e))?;
        Ok(summary_path)
    }
}

pub fn summary_path_for(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("summary.json")
}

/// Mutable state of one run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    pool: &'a OperatorPool,
    hamiltonian: &'a Hamiltonian,
    params: ModelParams,
    reference: ModelParams,
    optimizer: AdamW,
    buffer: ReplayBuffer,
    sample_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    best: Option<(f64, CircuitSequence)>,
    next_step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, pool: &'a OperatorPool, hamiltonian: &'a Hamiltonian) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.vocab_size != pool.len() {
            return Err(GqeError::input(format!(
                "model vocab_size {} does not match pool size {}",
                cfg.model.vocab_size,
                pool.len()
            )));
        }
        if pool.n_qubits() != hamiltonian.n_qubits {
            return Err(GqeError::input("pool and Hamiltonian disagree on the qubit count"));
        }
        let params = init_model(&cfg.model, cfg.seed)?;
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k);
            rng
        };
        Ok(Trainer {
            reference: params.clone(),
            optimizer: AdamW::new(AdamWConfig::new(cfg.learning_rate, cfg.weight_decay), params.n_params())?,
            buffer: ReplayBuffer::new(cfg.hybrid)?,
            sample_rng: stream(SAMPLING_STREAM),
            replay_rng: stream(REPLAY_STREAM),
            params,
            cfg,
            pool,
            hamiltonian,
            best: None,
            next_step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn reference(&self) -> &ModelParams {
        &self.reference
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn best(&self) -> Option<(f64, &CircuitSequence)> {
        self.best.as_ref().map(|(e, s)| (*e, s))
    }

    pub fn is_finished(&self) -> bool {
        self.next_step >= self.cfg.schedule.n_steps
    }

    fn generate(&mut self, temperature: f64) -> Result<Vec<CircuitSequence>> {
        let (m, n) = (self.cfg.samples_per_step, self.cfg.model.max_len);
        if self.cfg.debug.force_identity {
            return Ok(vec![CircuitSequence::new(vec![0; n]); m]);
        }
        sample_sequences(&self.params, m, temperature, &mut self.sample_rng)
    }

    fn energies(&self, seqs: &[CircuitSequence]) -> Result<Vec<f64>> {
        seqs.par_iter()
            .map(|s| evaluate_sequence(self.pool, s, self.hamiltonian))
            .collect()
    }

    fn recheck(&self, samples: &[EnergySample]) -> Result<()> {
        let seqs: Vec<CircuitSequence> = samples.iter().map(|s| s.sequence.clone()).collect();
        let energies = self.energies(&seqs)?;
        let ref_logp = batch_log_probs(&self.reference, &seqs)?;
        for ((s, e), r) in samples.iter().zip(energies).zip(ref_logp) {
            if (s.energy - e).abs() > 1e-12 || (s.ref_logp - r.total).abs() > 1e-10 {
                return Err(GqeError::Numeric(format!(
                    "cached values of {:?} drifted: energy {} vs {e}, ref log-prob {} vs {}",
                    s.sequence.tokens, s.energy, s.ref_logp, r.total
                )));
            }
        }
        Ok(())
    }

    /// Runs the next step of the schedule.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.next_step;
        let temp = temperature(t, &self.cfg.schedule)?;
        let seqs = self.generate(temp)?;
        let energies = self.energies(&seqs)?;
        let ref_logp = batch_log_probs(&self.reference, &seqs)?;
        let online: Vec<EnergySample> = seqs
            .into_iter()
            .zip(energies)
            .zip(ref_logp)
            .map(|((sequence, energy), r)| EnergySample {
                sequence,
                energy,
                created_step: t,
                ref_logp: r.total,
            })
            .collect();

        let assembled = self.buffer.assemble_step(&online, t, &mut self.replay_rng);
        if self.cfg.debug.recheck_cache {
            self.recheck(&assembled)?;
        }

        let (loss, n_pairs) = match pair_best_vs_others(&assembled) {
            Ok(batch) => (Some(self.update(&batch)?), batch.len()),
            Err(GqeError::EmptyBatch(_)) => (None, 0),
            Err(e) => return Err(e),
        };

        let batch_best = online
            .iter()
            .reduce(|a, b| if b.energy < a.energy { b } else { a })
            .expect("at least two samples");
        if self.best.as_ref().is_none_or(|(e, _)| batch_best.energy < *e) {
            self.best = Some((batch_best.energy, batch_best.sequence.clone()));
        }
        self.next_step += 1;
        Ok(StepRecord {
            step: t,
            temperature: temp,
            batch_min_energy: batch_best.energy,
            min_energy_so_far: self.best.as_ref().expect("set above").0,
            loss,
            n_pairs,
            buffer_size: self.buffer.len(),
        })
    }

    fn update(&mut self, batch: &PreferenceBatch) -> Result<f64> {
        let mut grads = self.params.zeros_like();
        let out = batch_loss_and_grad(&self.params, batch, &self.cfg.loss, &mut grads)?;
        if !grads.all_finite() {
            return Err(GqeError::Numeric(format!("non-finite gradient at loss {}", out.loss)));
        }
        if let Some(max_norm) = self.cfg.grad_clip {
            let flat = grads.flatten();
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                let scaled: Vec<f64> = flat.iter().map(|g| g * max_norm / norm).collect();
                grads.assign_flat(&scaled)?;
            }
        }
        self.optimizer.step(&mut self.params, &grads)?;
        if !self.params.all_finite() {
            return Err(GqeError::Numeric("parameters became non-finite".into()));
        }
        Ok(out.loss)
    }

    /// Runs every remaining step.
    pub fn run(&mut self) -> Result<RunLog> {
        let start = Instant::now();
        let mut records = Vec::with_capacity(self.cfg.schedule.n_steps);
        while !self.is_finished() {
            records.push(self.step()?);
        }
        self.finish(records, start.elapsed().as_secs_f64())
    }

    fn finish(&self, records: Vec<StepRecord>, wall_time_seconds: f64) -> Result<RunLog> {
        let (best_energy, best_sequence) = self
            .best
            .as_ref()
            .map(|(e, s)| (*e, s.tokens.clone()))
            .ok_or_else(|| GqeError::input("run has no steps"))?;
        Ok(RunLog {
            records,
            summary: RunSummary {
                best_energy,
                best_sequence,
                seed: self.cfg.seed,
                config_digest: self.cfg.config_digest()?,
            },
            wall_time_seconds,
        })
    }
}

/// Loads the Hamiltonian, builds the pool, runs the schedule and writes the
/// CSV and summary to `output_path`.
pub fn train(cfg: &TrainConfig) -> Result<RunLog> {
    let h = Hamiltonian::load(&cfg.hamiltonian_path)?;
    let pool = OperatorPool::for_hamiltonian(&h, &default_angle_set())?;
    let log = Trainer::new(cfg.clone(), &pool, &h)?.run()?;
    log.write(&cfg.output_path)?;
    Ok(log)
}

/// Largest relative difference between the analytic gradient of the batch
/// loss and central finite differences with step `1e-4`, over every
/// parameter. Differences are taken relative to `max(|analytic|, |fd|, 1e-6)`,
/// so gradients near zero are compared absolutely.
pub fn gradcheck(params: &ModelParams, batch: &PreferenceBatch, loss: &LossConfig) -> Result<f64> {
    const STEP: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let mut grads = params.zeros_like();
    batch_loss_and_grad(params, batch, loss, &mut grads)?;
    let analytic = grads.flatten();
    let base = params.flatten();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + STEP;
        probe.assign_flat(&flat)?;
        let plus = batch_loss(&probe, batch, loss)?.loss;
        flat[i] = base[i] - STEP;
        probe.assign_flat(&flat)?;
        let minus = batch_loss(&probe, batch, loss)?.loss;
        flat[i] = base[i];
        let fd = (plus - minus) / (2.0 * STEP);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h2() -> Hamiltonian {
        Hamiltonian::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/h2.json")).unwrap()
    }

    fn quick_config(pool: &OperatorPool, steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::desk("h2.json", pool.len());
        cfg.model.embed_dim = 16;
        cfg.model.ff_dim = 32;
        cfg.model.max_len = 4;
        cfg.schedule.n_steps = steps;
        cfg
    }

    #[test]
    fn schedule_examples() {
        let s = ScheduleConfig::paper();
        assert_eq!(temperature(0, &s).unwrap(), 1.5);
        assert_eq!(temperature(2999, &s).unwrap(), 0.7);
        assert!((temperature(1500, &s).unwrap() - (1.5 - 0.8 * 1500.0 / 2999.0)).abs() < 1e-15);
        assert!(temperature(3000, &s).is_err());
        assert_eq!(temperature(0, &ScheduleConfig::new(1.5, 0.7, 1)).unwrap(), 1.5);
    }

    #[test]
    fn toml_round_trip_and_digest() {
        let cfg = TrainConfig::desk("data/h2.json", 25);
        let text = cfg.to_toml_string().unwrap();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_digest().unwrap(), cfg.config_digest().unwrap());
        assert_eq!(cfg.config_digest().unwrap().len(), 64);
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(other.config_digest().unwrap(), cfg.config_digest().unwrap());
        assert!(TrainConfig::from_toml_str(&(text + "\nbogus = 1\n")).is_err());
    }

    #[test]
    fn rejects_invalid_configs() {
        let h = h2();
        let pool = OperatorPool::for_hamiltonian(&h, &default_angle_set()).unwrap();
        let base = quick_config(&pool, 2);
        let mut c = base.clone();
        c.samples_per_step = 1;
        assert!(Trainer::new(c, &pool, &h).is_err());
        let mut c = base.clone();
        c.model.vocab_size = 24;
        assert!(Trainer::new(c, &pool, &h).is_err());
        let mut c = base.clone();
        c.model.dropout = 0.1;
        assert!(Trainer::new(c, &pool, &h).is_err());
        let mut c = base;
        c.learning_rate = 0.0;
        assert!(Trainer::new(c, &pool, &h).is_err());
    }

    #[test]
    fn one_step_two_samples() {
        let h = h2();
        let pool = OperatorPool::for_hamiltonian(&h, &default_angle_set()).unwrap();
        let mut cfg = quick_config(&pool, 1);
        cfg.samples_per_step = 2;
        let log = Trainer::new(cfg, &pool, &h).unwrap().run().unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].temperature, 1.5);
    }

    #[test]
    fn identity_only_run_stays_at_hf_and_never_updates() {
        let h = h2();
        let pool = OperatorPool::for_hamiltonian(&h, &default_angle_set()).unwrap();
        let mut cfg = quick_config(&pool, 5);
        cfg.debug.force_identity = true;
        let hf = evaluate_sequence(&pool, &CircuitSequence::new(vec![0]), &h).unwrap();
        let mut tr = Trainer::new(cfg, &pool, &h).unwrap();
        let before = tr.params().clone();
        for _ in 0..5 {
            let r = tr.step().unwrap();
            assert_eq!(r.min_energy_so_far, hf);
            assert_eq!(r.n_pairs, 0);
            assert_eq!(r.loss, None);
        }
        assert_eq!(tr.params(), &before);
    }

    #[test]
    fn records_are_consistent_and_deterministic() {
        let h = h2();
        let pool = OperatorPool::for_hamiltonian(&h, &default_angle_set()).unwrap();
        let mut cfg = quick_config(&pool, 12);
        cfg.hybrid = HybridConfig::new(6, 2, 4).unwrap();
        cfg.debug.recheck_cache = true;
        let a = Trainer::new(cfg.clone(), &pool, &h).unwrap().run().unwrap();
        let b = Trainer::new(cfg, &pool, &h).unwrap().run().unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.summary, b.summary);
        for w in a.records.windows(2) {
            assert!(w[1].min_energy_so_far <= w[0].min_energy_so_far);
        }
        for r in &a.records {
            assert!(r.buffer_size <= 6);
            assert!(r.min_energy_so_far <= r.batch_min_energy);
            assert!(r.n_pairs <= if r.step >= 4 { 11 } else { 9 });
        }
        let csv = a.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 13);
        let best = evaluate_sequence(&pool, &CircuitSequence::new(a.summary.best_sequence.clone()), &h).unwrap();
        assert_eq!(best, a.summary.best_energy);
    }

    #[test]
    fn parameters_change_only_when_pairs_exist() {
        let h = h2();
        let pool = OperatorPool::for_hamiltonian(&h, &default_angle_set()).unwrap();
        let mut tr = Trainer::new(quick_config(&pool, 4), &pool, &h).unwrap();
        for _ in 0..4 {
            let before = tr.params().clone();
            let r = tr.step().unwrap();
            assert_eq!(r.n_pairs > 0, tr.params() != &before);
        }
    }

    #[test]
    fn writes_csv_and_summary() {
        let h = h2();
        let pool = OperatorPool::for_hamiltonian(&h, &default_angle_set()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(&pool, 3);
        cfg.hamiltonian_path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/h2.json").into();
        cfg.output_path = dir.path().join("run7.csv");
        let log = train(&cfg).unwrap();
        let csv = std::fs::read_to_string(&cfg.output_path).unwrap();
        assert_eq!(csv, log.to_csv());
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("run7.summary.json")).unwrap()).unwrap();
        assert_eq!(summary["seed"], 42);
        assert_eq!(summary["config_digest"], cfg.config_digest().unwrap());
        assert!(summary["best_sequence"].as_array().unwrap().len() == 4);
    }
}
