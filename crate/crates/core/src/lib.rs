//! TD(0) policy evaluation on polynomially mixing finite Markov chains, with
//! exact and Monte-Carlo diagnostics for mixing, coupling, block dependence,
//! martingale structure, ReLU activation regions and convergence rates.

pub mod approx;
pub mod chain;
pub mod decomp;
pub mod depend;
pub mod error;
pub mod experiments;
pub mod plot;
pub mod rates;
pub mod relu_diag;
pub mod seeds;
pub mod stats;
pub mod td;

pub use error::{Error, Result};
