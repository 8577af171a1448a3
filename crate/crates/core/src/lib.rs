//! Simulation and verification engine for stochastic functional differential
//! equations with finite delay and jumps.
//!
//! The state of such an equation at time `t` is not a point but a *segment*:
//! the path over the trailing delay window `[t - tau, t]`, living in the space
//! of cadlag functions equipped with the uniform (and optionally Skorohod)
//! metric. This crate provides:
//!
//! - segment containers and metrics ([`segment`]),
//! - model descriptions with drift/diffusion/jump functionals and assumption
//!   probes ([`model`]),
//! - an event-driven Euler scheme with exact jump-time insertion ([`sim`]),
//! - a generalized-coupling construction with drift correction, controlled by
//!   Girsanov reweighting ([`coupling`]),
//! - empirical Wasserstein distances between segment ensembles ([`transport`]),
//! - long-run diagnostics assembling the pieces into an ergodicity verdict
//!   with explicit convergence-rate bounds ([`ergodicity`]).
//!
//! All randomness is driven by counter-based streams derived from
//! `(master_seed, path_index, substream)`, so every estimate is reproducible
//! bit-for-bit regardless of thread count ([`rng`]).

pub mod coupling;
pub mod ergodicity;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod segment;
pub mod sim;
pub mod stats;
pub mod transport;

use thiserror::Error;

/// Errors shared across the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Two objects that must agree on dimension or delay length do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A model definition violates its own declared constraints.
    #[error("invalid model: {0}")]
    InvalidModel(String),
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// A simulated state became non-finite.
    #[error("trajectory diverged (non-finite state) at t = {time}")]
    Divergence { time: f64 },
    /// The diffusion matrix could not be inverted where an inverse is needed.
    #[error("singular diffusion matrix at t = {time}: {detail}")]
    SingularDiffusion { time: f64, detail: String },
    /// A fit or estimate was requested on degenerate data.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// An adaptive search exhausted its budget without success.
    #[error("search failed: {0}")]
    SearchFailed(String),
    /// An iterative solver did not reach its tolerance.
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    /// A requested time lies outside the simulated horizon.
    #[error("time {time} outside covered range [{lo}, {hi}]")]
    TimeOutsideRange { time: f64, lo: f64, hi: f64 },
    /// Problem size exceeds a configured cap.
    #[error("problem size {size} exceeds cap {cap}: {context}")]
    SizeCap {
        size: usize,
        cap: usize,
        context: String,
    },
    /// Malformed serialized data.
    #[error("parse error: {0}")]
    Parse(String),
}

/// Convenient result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Formats a float with 17 significant decimal digits, enough to reproduce
/// the original bit pattern on parse. All CSV output uses this format.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod fmt_tests {
    #[test]
    fn g17_round_trips_bit_patterns() {
        for &x in &[
            0.0,
            -0.0,
            1.0,
            std::f64::consts::PI,
            -2.2250738585072014e-308,
            0.1 + 0.2,
            1e300,
            -7.5e-11,
        ] {
            let back: f64 = super::fmt_g17(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "failed for {x}");
        }
    }
}
