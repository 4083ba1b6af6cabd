//! Renormalized self-Hamiltonian statistics of a small quantum system
//! coupled to a spin-chain environment, computed by exact diagonalization.
//!
//! The total Hilbert space factorizes as `S ⊗ A ⊗ B`: the system `S`, the
//! part `A` of the environment that the interaction touches, and the bulk
//! `B`. Everything is dense and double precision.

pub mod diagnostics;
pub mod ensembles;
pub mod error;
pub mod experiment;
pub mod hilbert;
pub mod kv;
pub mod linalg;
pub mod models;
pub mod renorm;
pub mod rng;
pub mod spectra;
pub mod stats;
#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use linalg::{Op, C64};
