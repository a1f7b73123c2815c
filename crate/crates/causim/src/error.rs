//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the simulation, extraction and certification layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),

    #[error("factor index out of range: {0}")]
    FactorOutOfRange(String),

    #[error("operator is not unitary: {0}")]
    NotUnitary(String),

    /// Structurally malformed protocol (wrong shapes, too few steps).
    /// Distinct from [`Error::InvalidProtocol`], which reports a
    /// well-formed protocol that fails the flag-leakage requirement.
    #[error("structural protocol error: {0}")]
    Structural(String),

    #[error(
        "protocol invalid: flag leakage {leak:.3e} exceeds {tol:.1e} ({detail})"
    )]
    InvalidProtocol { leak: f64, tol: f64, detail: String },

    #[error("setting out of domain: {0}")]
    SettingOutOfDomain(String),

    #[error("outcome out of range: {0}")]
    OutcomeOutOfRange(String),

    #[error("invalid history: {0}")]
    InvalidHistory(String),

    /// A conditional probability was requested at a history the protocol
    /// never reaches (denominator below the reachability cutoff).
    #[error("unreachable history: {0}")]
    UnreachableHistory(String),

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    /// A numerical routine could not reach a trustworthy answer.
    #[error("indeterminate: {0}")]
    Indeterminate(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;
