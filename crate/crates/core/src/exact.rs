//! Exact ground energy by diagonalization.
//!
//! Up to [`DENSE_MAX_QUBITS`] the full Hermitian matrix is built and
//! diagonalized; above that a Lanczos iteration with full
//! reorthogonalization runs on matrix-free Pauli-sum products.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GqeError, Result};
use crate::hamiltonian::Hamiltonian;
use crate::statevec::apply_pauli_sum;

pub const DENSE_MAX_QUBITS: usize = 10;
pub const EXACT_MAX_QUBITS: usize = 16;

const LANCZOS_TOL: f64 = 1e-10;

/// Minimum eigenvalue of `h` over the full `2^n` Hilbert space.
pub fn exact_ground_energy(h: &Hamiltonian) -> Result<f64> {
    if h.n_qubits > EXACT_MAX_QUBITS {
        return Err(GqeError::Capability(format!(
            "exact diagonalization supports at most {EXACT_MAX_QUBITS} qubits, got {}",
            h.n_qubits
        )));
    }
    if h.n_qubits <= DENSE_MAX_QUBITS {
        Ok(dense_ground_energy(h))
    } else {
        lanczos_ground_energy(h)
    }
}

/// Dense Hermitian matrix of `h`.
pub fn hamiltonian_matrix(h: &Hamiltonian) -> DMatrix<Complex64> {
    let dim = 1usize << h.n_qubits;
    let mut m = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));
    let mut column = vec![Complex64::new(0.0, 0.0); dim];
    let mut unit = vec![Complex64::new(0.0, 0.0); dim];
    for j in 0..dim {
        unit[j] = Complex64::new(1.0, 0.0);
        column.fill(Complex64::new(0.0, 0.0));
        apply_pauli_sum(h, &unit, &mut column);
        for (i, &v) in column.iter().enumerate() {
            m[(i, j)] = v;
        }
        unit[j] = Complex64::new(0.0, 0.0);
    }
    m
}

/// Dense route, regardless of size.
pub fn dense_ground_energy(h: &Hamiltonian) -> f64 {
    let eig = hamiltonian_matrix(h).symmetric_eigenvalues();
    eig.iter().copied().fold(f64::INFINITY, f64::min)
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Smallest eigenvalue of the symmetric tridiagonal matrix and the last
/// component of its eigenvector.
fn tridiagonal_min(alpha: &[f64], beta: &[f64]) -> (f64, f64) {
    let k = alpha.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = t.symmetric_eigen();
    let (idx, &val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty tridiagonal");
    (val, eig.eigenvectors[(k - 1, idx)])
}

/// Lanczos route, regardless of size.
pub fn lanczos_ground_energy(h: &Hamiltonian) -> Result<f64> {
    let dim = 1usize << h.n_qubits;
    let max_iter = dim.min(400);
    let mut rng = ChaCha8Rng::seed_from_u64(0x01a2_c705);
    let mut v: Vec<Complex64> = (0..dim)
        .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        .collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut basis: Vec<Vec<Complex64>> = Vec::new();
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![Complex64::new(0.0, 0.0); dim];
    let mut previous = f64::INFINITY;

    for iter in 0..max_iter {
        w.fill(Complex64::new(0.0, 0.0));
        apply_pauli_sum(h, &v, &mut w);
        let a = dot(&v, &w).re;
        alpha.push(a);
        basis.push(v.clone());
        // Full reorthogonalization, twice for stability.
        for _ in 0..2 {
            for q in &basis {
                let proj = dot(q, &w);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let b = norm(&w);
        if iter % 5 == 4 || b < 1e-14 || iter + 1 == max_iter {
            let (theta, last) = tridiagonal_min(&alpha, &beta);
            if !theta.is_finite() {
                return Err(GqeError::Numeric("Lanczos produced a non-finite Ritz value".into()));
            }
            let residual = (b * last).abs();
            if residual < LANCZOS_TOL || b < 1e-14 || ((theta - previous).abs() < 1e-14 && residual < 1e-8) {
                return Ok(theta);
            }
            previous = theta;
        }
        beta.push(b);
        v = w.iter().map(|x| x / b).collect();
    }
    Err(GqeError::Numeric(format!(
        "Lanczos did not converge in {max_iter} iterations"
    )))
}
