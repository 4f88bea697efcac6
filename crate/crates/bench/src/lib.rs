//! Shared fixtures for the criterion benchmarks.

use std::path::PathBuf;

use gqe_core::Hamiltonian;

/// Path of a committed Hamiltonian data file.
pub fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub fn load_hamiltonian(name: &str) -> Hamiltonian {
    Hamiltonian::load(data_file(name)).expect("committed data file")
}
