//! Effective Hamiltonians for slowly perturbed magnetic Bloch electrons.
//!
//! The crate builds the fiber Hamiltonian of a periodic crystal in a constant
//! magnetic field, samples and gauge-fixes an isolated Bloch band, evaluates the
//! Peierls symbol `h0` with its first-order correction `h1`, and checks the
//! resulting effective dynamics against the full Schrödinger equation.
//!
//! Units: `hbar = 2m = e = 1`.

pub mod atlas;
pub mod config;
pub mod direct;
pub mod error;
pub mod fiber;
pub mod fit;
pub mod interp;
pub mod linalg;
pub mod lobpcg;
pub mod models;
pub mod ode;
pub mod output;
pub mod physical;
pub mod quantizer;
pub mod semiclassics;
pub mod symbols;
pub mod validation;

pub use config::{load_spec, Epsilon, ModelSpec};
pub use error::{BlochError, Result};
pub use num_complex::Complex64;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
