//! Operator pool: identity plus every spin-conserving excitation at every
//! quantized angle, indexed by token.
//!
//! Spin orbitals are interleaved (even index spin-up, odd index spin-down of
//! the same spatial orbital) and the Hartree–Fock reference fills the lowest
//! `n_electrons` of them. Token 0 is the identity; the remaining tokens are
//! excitation-major and angle-minor, singles before doubles.

use serde::{Deserialize, Serialize};

use crate::error::{GqeError, Result};
use crate::hamiltonian::{ExcitationLists, Hamiltonian};
use crate::statevec::{expectation, hartree_fock_state, GateKind, GateSpec, StateVector};

/// Single excitations `(occupied, virtual)` and double excitations
/// `(occ, occ, virt, virt)` out of the reference determinant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Excitations {
    pub singles: Vec<[usize; 2]>,
    pub doubles: Vec<[usize; 4]>,
}

fn spin(orbital: usize) -> usize {
    orbital % 2
}

pub fn enumerate_excitations(n_electrons: usize, n_qubits: usize) -> Result<Excitations> {
    if n_electrons == 0 || n_electrons >= n_qubits {
        return Err(GqeError::input(format!(
            "need 0 < n_electrons < n_qubits, got {n_electrons} electrons in {n_qubits} spin orbitals"
        )));
    }
    let occupied = 0..n_electrons;
    let virtuals = n_electrons..n_qubits;

    let mut singles = Vec::new();
    for p in occupied.clone() {
        for q in virtuals.clone() {
            if spin(p) == spin(q) {
                singles.push([p, q]);
            }
        }
    }

    let mut doubles = Vec::new();
    for p in occupied.clone() {
        for q in p + 1..n_electrons {
            for r in virtuals.clone() {
                for s in r + 1..n_qubits {
                    if spin(p) + spin(q) == spin(r) + spin(s) {
                        doubles.push([p, q, r, s]);
                    }
                }
            }
        }
    }
    Ok(Excitations { singles, doubles })
}

/// `{±2^k / 160 : k = 1..4}`, ordered by increasing magnitude, positive first.
pub fn default_angle_set() -> Vec<f64> {
    (1..=4)
        .flat_map(|k| {
            let a = f64::from(1u32 << k) / 160.0;
            [a, -a]
        })
        .collect()
}

/// Token sequence `j⃗`; every token indexes the pool (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CircuitSequence {
    pub tokens: Vec<usize>,
}

impl CircuitSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        CircuitSequence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorPool {
    gates: Vec<GateSpec>,
    n_qubits: usize,
    n_electrons: usize,
    angle_set: Vec<f64>,
    n_singles: usize,
    n_doubles: usize,
}

pub fn build_pool(n_electrons: usize, n_qubits: usize, angle_set: &[f64]) -> Result<OperatorPool> {
    if angle_set.is_empty() {
        return Err(GqeError::input("angle set is empty"));
    }
    if angle_set.iter().any(|a| !a.is_finite()) {
        return Err(GqeError::input("angle set contains a non-finite value"));
    }
    let exc = enumerate_excitations(n_electrons, n_qubits)?;
    let mut gates = Vec::with_capacity(1 + (exc.singles.len() + exc.doubles.len()) * angle_set.len());
    gates.push(GateSpec::identity());
    for &[p, q] in &exc.singles {
        gates.extend(angle_set.iter().map(|&a| GateSpec::single(p, q, a)));
    }
    for &[p, q, r, s] in &exc.doubles {
        gates.extend(angle_set.iter().map(|&a| GateSpec::double(p, q, r, s, a)));
    }
    Ok(OperatorPool {
        gates,
        n_qubits,
        n_electrons,
        angle_set: angle_set.to_vec(),
        n_singles: exc.singles.len(),
        n_doubles: exc.doubles.len(),
    })
}

impl OperatorPool {
    /// Builds the pool for `h`'s reference state, cross-checking any
    /// excitation lists embedded in the file.
    pub fn for_hamiltonian(h: &Hamiltonian, angle_set: &[f64]) -> Result<Self> {
        let n_electrons = h.n_electrons();
        let expected_occ: Vec<u8> = (0..h.n_qubits).map(|q| u8::from(q < n_electrons)).collect();
        if h.hf_occupation != expected_occ {
            return Err(GqeError::input(format!(
                "hf_occupation {:?} does not fill the lowest {n_electrons} spin orbitals",
                h.hf_occupation
            )));
        }
        let pool = build_pool(n_electrons, h.n_qubits, angle_set)?;
        if let Some(listed) = &h.excitations {
            let own = enumerate_excitations(n_electrons, h.n_qubits)?;
            let own = ExcitationLists {
                singles: own.singles,
                doubles: own.doubles,
            };
            if &own != listed {
                return Err(GqeError::input(format!(
                    "excitation lists in {:?} disagree with the interleaved-spin enumeration \
                     ({} singles / {} doubles in file, {} / {} enumerated)",
                    h.name,
                    listed.singles.len(),
                    listed.doubles.len(),
                    own.singles.len(),
                    own.doubles.len()
                )));
            }
        }
        Ok(pool)
    }

    /// Pool size `L`.
    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_electrons(&self) -> usize {
        self.n_electrons
    }

    pub fn n_singles(&self) -> usize {
        self.n_singles
    }

    pub fn n_doubles(&self) -> usize {
        self.n_doubles
    }

    pub fn angle_set(&self) -> &[f64] {
        &self.angle_set
    }

    pub fn gates(&self) -> &[GateSpec] {
        &self.gates
    }

    pub fn token_to_gate(&self, token: usize) -> Result<&GateSpec> {
        self.gates
            .get(token)
            .ok_or_else(|| GqeError::input(format!("token {token} out of range for pool of size {}", self.len())))
    }

    pub fn validate_sequence(&self, seq: &CircuitSequence) -> Result<()> {
        match seq.tokens.iter().find(|&&t| t >= self.len()) {
            Some(t) => Err(GqeError::input(format!(
                "token {t} out of range for pool of size {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }

    /// Applies the sequence's gates, in order, to the Hartree–Fock state.
    pub fn prepare_state(&self, seq: &CircuitSequence, h: &Hamiltonian) -> Result<StateVector> {
        if h.n_qubits != self.n_qubits {
            return Err(GqeError::input(format!(
                "pool acts on {} qubits, Hamiltonian on {}",
                self.n_qubits, h.n_qubits
            )));
        }
        self.validate_sequence(seq)?;
        let mut state = hartree_fock_state(h.n_qubits, &h.hf_occupation)?;
        for &t in &seq.tokens {
            let gate = &self.gates[t];
            if gate.kind != GateKind::Identity {
                state.apply(gate)?;
            }
        }
        Ok(state)
    }
}

/// Energy `E(j⃗)` of the circuit encoded by `seq`.
pub fn evaluate_sequence(pool: &OperatorPool, seq: &CircuitSequence, h: &Hamiltonian) -> Result<f64> {
    expectation(&pool.prepare_state(seq, h)?, h)
}
