//! Crate-wide error type.

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Clone, Error)]
pub enum CoreError {
    /// Operand dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A value failed a validation predicate (normalization, stochasticity,
    /// unitarity, nonnegativity, ...).
    #[error("invalid input in {context}: {detail}")]
    InvalidInput { context: &'static str, detail: String },

    /// A Kraus list does not preserve the trace within tolerance.
    #[error("channel is not trace preserving: deviation {deviation:.3e} exceeds {tol:.3e}")]
    NotTracePreserving { deviation: f64, tol: f64 },

    /// An MPS failed a canonical-form check.
    #[error("site {site} is not canonical: deviation {deviation:.3e} exceeds {tol:.3e}")]
    NotCanonical { site: usize, deviation: f64, tol: f64 },

    /// A compilation route declined the input; a different route applies.
    #[error("route refused: {reason}")]
    RouteRefused { reason: String },

    /// The request exceeds the configured dense-simulation cap.
    #[error("dimension cap exceeded in {context}: {needed} > {cap}")]
    CapExceeded {
        context: &'static str,
        needed: u128,
        cap: u128,
    },

    /// A directed network contains a cycle.
    #[error("network is cyclic; witness vertices {witness:?}")]
    CyclicNetwork { witness: Vec<usize> },

    /// A machine step was attempted from a halting control state or with the
    /// head out of range.
    #[error("machine fault: {detail}")]
    MachineFault { detail: String },

    /// A nonnegative factorization produced an invalid intermediate.
    #[error("stochastic factorization failed at site {site}: {detail}")]
    FactorizationFailure { site: usize, detail: String },

    /// An internal invariant that should be unreachable was violated.
    #[error("internal invariant violated: {detail}")]
    Internal { detail: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
