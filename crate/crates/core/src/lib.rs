//! Generative search for low-energy quantum circuits.
//!
//! A small autoregressive decoder emits sequences of operator-pool tokens.
//! Each sequence is a circuit of particle-conserving excitation gates applied
//! to the Hartree–Fock state; its energy under a Pauli-sum Hamiltonian ranks
//! it against the other sequences of the same step. The model is trained
//! with a preference loss (DPO or its persistent variant, P-DPO) on
//! best-vs-others pairs, optionally augmented with low-energy samples
//! replayed from a bounded buffer.
//!
//! Module map:
//! - [`hamiltonian`], [`statevec`], [`exact`]: dense simulation and the exact
//!   ground-energy oracle.
//! - [`pool`]: excitation enumeration, operator pool, token → gate mapping.
//! - [`model`]: decoder-only transformer with hand-written backpropagation.
//! - [`loss`]: pairing and the DPO / P-DPO objectives.
//! - [`replay`]: capacity-bounded sample store with highest-energy eviction.
//! - [`optim`], [`trainer`]: AdamW and the training loop.
//! - [`aggregate`]: multi-seed curve aggregation.

pub mod aggregate;
pub mod error;
pub mod exact;
pub mod hamiltonian;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pool;
pub mod replay;
pub mod statevec;
pub mod trainer;

pub use error::{GqeError, Result};
pub use exact::exact_ground_energy;
pub use hamiltonian::{Hamiltonian, PauliTerm};
pub use loss::{LossConfig, LossVariant, PreferenceBatch, PreferencePair};
pub use model::{ModelConfig, ModelParams};
pub use pool::{CircuitSequence, OperatorPool};
pub use replay::{EnergySample, HybridConfig, ReplayBuffer};
pub use statevec::{GateKind, GateSpec, StateVector};
pub use trainer::{RunLog, ScheduleConfig, StepRecord, TrainConfig};
