//! Pauli-sum Hamiltonians and their JSON file format.
//!
//! File layout:
//!
//! ```text
//! {"name": str, "n_qubits": int, "hf_occupation": [0|1, ...],
//!  "terms": [{"coeff": float, "word": "IIXZ..."}, ...],
//!  "ground_energy_hint": float | null,
//!  "excitations": {"singles": [[p,q],...], "doubles": [[p,q,r,s],...]}}   (optional)
//! ```
//!
//! Character `k` of a word acts on qubit `k`; qubit 0 is the most
//! significant bit of a basis-state index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GqeError, Result};

/// One weighted Pauli string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PauliTerm {
    #[serde(rename = "coeff")]
    pub coefficient: f64,
    pub word: String,
}

/// Bit masks of a Pauli word over `n` qubits, in basis-index bit positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PauliMasks {
    /// Qubits carrying X or Y (flipped).
    pub flip: usize,
    /// Qubits carrying Z or Y (sign).
    pub phase: usize,
    /// Number of Y factors.
    pub n_y: u32,
}

impl PauliTerm {
    pub fn new(coefficient: f64, word: impl Into<String>) -> Self {
        PauliTerm {
            coefficient,
            word: word.into(),
        }
    }

    pub(crate) fn masks(&self) -> PauliMasks {
        let n = self.word.len();
        let mut masks = PauliMasks {
            flip: 0,
            phase: 0,
            n_y: 0,
        };
        for (q, c) in self.word.bytes().enumerate() {
            let bit = 1usize << (n - 1 - q);
            match c {
                b'X' => masks.flip |= bit,
                b'Y' => {
                    masks.flip |= bit;
                    masks.phase |= bit;
                    masks.n_y += 1;
                }
                b'Z' => masks.phase |= bit,
                _ => {}
            }
        }
        masks
    }

    fn validate(&self, n_qubits: usize) -> Result<()> {
        if self.word.len() != n_qubits {
            return Err(GqeError::input(format!(
                "pauli word {:?} has length {}, expected {n_qubits}",
                self.word,
                self.word.len()
            )));
        }
        if let Some(c) = self.word.chars().find(|c| !matches!(c, 'I' | 'X' | 'Y' | 'Z')) {
            return Err(GqeError::input(format!(
                "pauli word {:?} contains invalid character {c:?}",
                self.word
            )));
        }
        if !self.coefficient.is_finite() {
            return Err(GqeError::input(format!("coefficient of {:?} is not finite", self.word)));
        }
        Ok(())
    }
}

/// Excitation lists optionally carried by a Hamiltonian file, used to
/// cross-check the pool's own enumeration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcitationLists {
    pub singles: Vec<[usize; 2]>,
    pub doubles: Vec<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hamiltonian {
    pub name: String,
    pub n_qubits: usize,
    pub hf_occupation: Vec<u8>,
    pub terms: Vec<PauliTerm>,
    #[serde(default)]
    pub ground_energy_hint: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excitations: Option<ExcitationLists>,
}

impl Hamiltonian {
    pub fn new(
        name: impl Into<String>,
        n_qubits: usize,
        terms: Vec<PauliTerm>,
        hf_occupation: Vec<u8>,
    ) -> Result<Self> {
        let h = Hamiltonian {
            name: name.into(),
            n_qubits,
            hf_occupation,
            terms,
            ground_energy_hint: None,
            excitations: None,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 {
            return Err(GqeError::input("n_qubits must be at least 1"));
        }
        if self.n_qubits >= usize::BITS as usize {
            return Err(GqeError::Capability(format!(
                "{} qubits cannot be indexed",
                self.n_qubits
            )));
        }
        for term in &self.terms {
            term.validate(self.n_qubits)?;
        }
        if self.hf_occupation.len() != self.n_qubits {
            return Err(GqeError::input(format!(
                "hf_occupation has length {}, expected {}",
                self.hf_occupation.len(),
                self.n_qubits
            )));
        }
        if self.hf_occupation.iter().any(|&b| b > 1) {
            return Err(GqeError::input("hf_occupation entries must be 0 or 1"));
        }
        if let Some(hint) = self.ground_energy_hint {
            if !hint.is_finite() {
                return Err(GqeError::input("ground_energy_hint is not finite"));
            }
        }
        Ok(())
    }

    /// Number of electrons in the Hartree–Fock reference.
    pub fn n_electrons(&self) -> usize {
        self.hf_occupation.iter().filter(|&&b| b == 1).count()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let h: Hamiltonian = serde_json::from_str(s)?;
        h.validate()?;
        Ok(h)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GqeError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Splits the term list at `at`, returning two Hamiltonians that sum to this one.
    pub fn split_terms(&self, at: usize) -> (Hamiltonian, Hamiltonian) {
        let at = at.min(self.terms.len());
        let mut head = self.clone();
        let mut tail = self.clone();
        head.terms.truncate(at);
        tail.terms.drain(..at);
        (head, tail)
    }
}
