//! Dense statevector simulation of excitation-gate circuits.
//!
//! Basis index bit `n - 1 - q` holds qubit `q` (qubit 0 is the most
//! significant bit), matching the left-to-right reading of Pauli words.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{GqeError, Result};
use crate::hamiltonian::Hamiltonian;

/// Largest imaginary residue tolerated in an expectation value.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;

/// Excitation gate sign convention.
///
/// For a rotation by `θ`, the "occupied" basis state (ones on the source
/// wires, zeros on the target wires) maps to `cos(θ/2)·itself +
/// sin(θ/2)·partner`, and the partner maps to `cos(θ/2)·partner −
/// sin(θ/2)·occupied`. Since every pool angle also appears negated, the
/// opposite convention reaches the same circuit set.
pub const EXCITATION_SIGN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    Identity,
    SingleExcitation,
    DoubleExcitation,
}

impl GateKind {
    pub fn n_wires(self) -> usize {
        match self {
            GateKind::Identity => 0,
            GateKind::SingleExcitation => 2,
            GateKind::DoubleExcitation => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub kind: GateKind,
    pub wires: Vec<usize>,
    pub angle: f64,
}

impl GateSpec {
    pub fn identity() -> Self {
        GateSpec {
            kind: GateKind::Identity,
            wires: Vec::new(),
            angle: 0.0,
        }
    }

    pub fn single(p: usize, q: usize, angle: f64) -> Self {
        GateSpec {
            kind: GateKind::SingleExcitation,
            wires: vec![p, q],
            angle,
        }
    }

    pub fn double(p: usize, q: usize, r: usize, s: usize, angle: f64) -> Self {
        GateSpec {
            kind: GateKind::DoubleExcitation,
            wires: vec![p, q, r, s],
            angle,
        }
    }

    /// Checks wire count, distinctness and range for an `n_qubits` register.
    pub fn validate(&self, n_qubits: usize) -> Result<()> {
        if self.wires.len() != self.kind.n_wires() {
            return Err(GqeError::input(format!(
                "{:?} needs {} wires, got {}",
                self.kind,
                self.kind.n_wires(),
                self.wires.len()
            )));
        }
        for (i, &w) in self.wires.iter().enumerate() {
            if w >= n_qubits {
                return Err(GqeError::input(format!("wire {w} out of range for {n_qubits} qubits")));
            }
            if self.wires[..i].contains(&w) {
                return Err(GqeError::input(format!("wire {w} repeated in {:?}", self.wires)));
            }
        }
        if !self.angle.is_finite() {
            return Err(GqeError::input("gate angle is not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// Computational basis state `|index⟩`.
    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits >= usize::BITS as usize - 1 {
            return Err(GqeError::input(format!("unsupported qubit count {n_qubits}")));
        }
        let dim = 1usize << n_qubits;
        if index >= dim {
            return Err(GqeError::input(format!("basis index {index} >= {dim}")));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); dim];
        amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(StateVector { n_qubits, amplitudes })
    }

    /// Wraps raw amplitudes; the length must be a power of two.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let dim = amplitudes.len();
        if dim < 2 || !dim.is_power_of_two() {
            return Err(GqeError::input(format!("state length {dim} is not 2^n with n >= 1")));
        }
        Ok(StateVector {
            n_qubits: dim.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    fn bit(&self, qubit: usize) -> usize {
        1usize << (self.n_qubits - 1 - qubit)
    }

    /// Applies `gate` in place.
    pub fn apply(&mut self, gate: &GateSpec) -> Result<()> {
        gate.validate(self.n_qubits)?;
        let (sources, targets): (&[usize], &[usize]) = match gate.kind {
            GateKind::Identity => return Ok(()),
            GateKind::SingleExcitation => (&gate.wires[..1], &gate.wires[1..]),
            GateKind::DoubleExcitation => (&gate.wires[..2], &gate.wires[2..]),
        };
        let src_mask = sources.iter().fold(0, |m, &w| m | self.bit(w));
        let tgt_mask = targets.iter().fold(0, |m, &w| m | self.bit(w));
        let flip = src_mask | tgt_mask;
        let (s, c) = (0.5 * gate.angle).sin_cos();
        let s = EXCITATION_SIGN * s;
        for b in 0..self.amplitudes.len() {
            if b & flip != src_mask {
                continue;
            }
            let partner = b ^ flip;
            let occ = self.amplitudes[b];
            let virt = self.amplitudes[partner];
            self.amplitudes[b] = occ * c - virt * s;
            self.amplitudes[partner] = occ * s + virt * c;
        }
        Ok(())
    }

    /// `H|ψ⟩` for a Pauli-sum Hamiltonian.
    pub fn apply_hamiltonian(&self, h: &Hamiltonian) -> Result<Vec<Complex64>> {
        self.check_dims(h)?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.amplitudes.len()];
        apply_pauli_sum(h, &self.amplitudes, &mut out);
        Ok(out)
    }

    fn check_dims(&self, h: &Hamiltonian) -> Result<()> {
        if h.n_qubits != self.n_qubits {
            return Err(GqeError::input(format!(
                "state has {} qubits, Hamiltonian has {}",
                self.n_qubits, h.n_qubits
            )));
        }
        Ok(())
    }
}

/// `i^k`
fn i_pow(k: u32) -> Complex64 {
    match k % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// Accumulates `H·input` into `out` (which must be zeroed by the caller).
pub(crate) fn apply_pauli_sum(h: &Hamiltonian, input: &[Complex64], out: &mut [Complex64]) {
    for term in &h.terms {
        let m = term.masks();
        let base = i_pow(m.n_y) * term.coefficient;
        for (b, &amp) in input.iter().enumerate() {
            let sign = if (b & m.phase).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            out[b ^ m.flip] += base * amp * sign;
        }
    }
}

/// Computational basis state whose bits equal `occupation`.
pub fn hartree_fock_state(n_qubits: usize, occupation: &[u8]) -> Result<StateVector> {
    if occupation.len() != n_qubits {
        return Err(GqeError::input(format!(
            "occupation has length {}, expected {n_qubits}",
            occupation.len()
        )));
    }
    let mut index = 0usize;
    for &bit in occupation {
        if bit > 1 {
            return Err(GqeError::input("occupation entries must be 0 or 1"));
        }
        index = (index << 1) | bit as usize;
    }
    StateVector::basis(n_qubits, index)
}

/// Returns a new state with `gate` applied.
pub fn apply_gate(state: &StateVector, gate: &GateSpec) -> Result<StateVector> {
    let mut out = state.clone();
    out.apply(gate)?;
    Ok(out)
}

/// `⟨ψ|H|ψ⟩`, after checking that its imaginary part is negligible.
pub fn expectation(state: &StateVector, h: &Hamiltonian) -> Result<f64> {
    state.check_dims(h)?;
    let psi = &state.amplitudes;
    let mut total = Complex64::new(0.0, 0.0);
    for term in &h.terms {
        let m = term.masks();
        let mut acc = Complex64::new(0.0, 0.0);
        for (b, &amp) in psi.iter().enumerate() {
            let v = psi[b ^ m.flip].conj() * amp;
            if (b & m.phase).count_ones() % 2 == 0 {
                acc += v;
            } else {
                acc -= v;
            }
        }
        total += acc * i_pow(m.n_y) * term.coefficient;
    }
    if !total.re.is_finite() || !total.im.is_finite() {
        return Err(GqeError::Numeric("expectation is not finite".into()));
    }
    if total.im.abs() > IMAG_RESIDUE_TOL {
        return Err(GqeError::Numeric(format!(
            "expectation has imaginary residue {:e}",
            total.im
        )));
    }
    Ok(total.re)
}

/// Expectation of the total number operator `Σ (1 − Z_q)/2`.
pub fn particle_number(state: &StateVector) -> f64 {
    state
        .amplitudes
        .iter()
        .enumerate()
        .map(|(b, a)| a.norm_sqr() * b.count_ones() as f64)
        .sum()
}
