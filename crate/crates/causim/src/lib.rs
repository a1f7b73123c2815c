//! Simulation and certification toolkit for quantum protocols whose causal
//! order is controlled coherently.
//!
//! A protocol consists of `N` parties that each measure a travelling quantum
//! system exactly once, with the order of the measurements steered by an
//! `(N+1)`-level quantum control. Superposing control states superposes
//! causal orders, and the interference between orders is observable in the
//! outcome statistics (the quantum switch is the canonical example).
//!
//! The crate provides:
//!
//! - a dense complex kernel for states, operators, tensor products and
//!   mixed-radix factor embeddings ([`tensor`]),
//! - the protocol model: composite space layout, the controlled
//!   lab-activation step, and validity checking ([`protocol`]),
//! - protocol execution and history-projected states ([`exec`]),
//! - extraction of a classical causal model that reproduces the quantum
//!   outcome statistics exactly, together with the verification machinery
//!   ([`extract`]),
//! - equivalence constructions between the single-control picture and
//!   circuits built from per-party controlled lab gates ([`equiv`]),
//! - causal-polytope membership via deterministic-strategy enumeration and
//!   LP feasibility ([`polytope`]),
//! - ready-made protocols and seeded generators used by the test suites and
//!   the CLI ([`fixtures`]).
//!
//! Data-parallel loops use rayon when the default `parallel` feature is
//! enabled; disabling it yields a fully sequential build.

pub mod dist;
pub mod equiv;
pub mod error;
pub mod exec;
pub mod extract;
pub mod fixtures;
pub mod par;
pub mod polytope;
pub mod protocol;
pub mod tensor;

pub use dist::{DistributionFamily, OutcomeDistribution};
pub use error::{Error, Result};
pub use protocol::{ProtocolSpec, SettingVector, SpaceLayout};
pub use tensor::{COperator, CState, C64};

/// Numeric tolerance tiers used across the crate.
///
/// Algebraic identities are held to a much tighter bound than end-to-end
/// distribution equalities, which accumulate error over the protocol steps.
/// The reachability cutoff sits well below both so that the gap absorbs the
/// multiplicative shrinking of extraction denominators with history depth.
pub mod tol {
    /// Algebraic identities: unitarity, projector idempotence, exact
    /// operator equalities.
    pub const ALGEBRAIC: f64 = 1e-12;
    /// End-to-end distribution equalities and flag-leakage validity.
    pub const DISTRIBUTION: f64 = 1e-9;
    /// Denominators at or below this are treated as unreachable branches.
    pub const REACHABILITY: f64 = 1e-12;
    /// Probability-table rows must sum to one within this bound.
    pub const TABLE_ROW: f64 = 1e-10;
    /// Orthogonality of end-of-protocol evolved projected states.
    pub const ORTHOGONALITY: f64 = 1e-10;
    /// Entrywise sector comparisons in the gate-equivalence constructions.
    pub const SECTOR: f64 = 1e-12;
    /// LP feasibility margin for polytope membership certificates.
    pub const LP_FEASIBILITY: f64 = 1e-7;
    /// Probability clamping beyond this margin raises a health warning.
    pub const CLAMP_WARNING: f64 = 1e-10;
    /// Amplitude allowed on a flag one raise away from cyclic wrap-around.
    pub const FLAG_WRAP: f64 = 1e-12;
    /// Reproduction of closed-form reference values in demos and tests.
    pub const REFERENCE_VALUE: f64 = 1e-10;
}
