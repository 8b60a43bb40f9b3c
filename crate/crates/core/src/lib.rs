//! Diffusive FitzHugh-Nagumo networks: steady-state response, equilibrium
//! propagation training, and layer-wise Hamiltonian inference.

pub mod cli;
pub mod dataio;
pub mod eqprop;
pub mod error;
pub mod experiments;
pub mod fhn;
pub mod graph;
pub mod ham_ebm;
pub mod ham_fhn;
pub mod numerics;

pub use error::{Error, Result};
