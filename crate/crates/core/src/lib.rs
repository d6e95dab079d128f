//! Entanglement spectra of spin-1/2 Heisenberg models from quantum Monte Carlo
//! sampling of reduced density matrices, with an exact-diagonalization
//! reference and the fits used to read off low-energy parameters.

pub mod ed;
pub mod error;
pub mod fit;
pub mod lanczos;
pub mod lattice;
pub mod matrix;
pub mod monitor;
pub mod pipeline;
pub mod rdm;
pub mod spectrum;
pub mod sse;

pub use error::{Error, Result};
