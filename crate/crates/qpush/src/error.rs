//! Crate-wide error type.
//!
//! Variants are deliberately specific: numerical validation failures
//! (divergent replicas, degenerate spectra) must be distinguishable from
//! plain configuration or I/O mistakes, because the former indicate a broken
//! run while the latter indicate a broken invocation.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The directed graph is not strongly connected, so push-sum weights
    /// cannot average over it.
    #[error("graph is not strongly connected")]
    NotStronglyConnected,

    /// A vector or matrix had the wrong dimension for the operation.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// An iterative estimate (e.g. the stationary vector) failed to settle
    /// within its iteration budget.
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
    },

    /// The fitted mixing-rate parameters are outside the open interval the
    /// contraction bounds require (lambda must lie strictly in (0, 1)).
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    /// A quantized message violated its own framing invariants.
    #[error("malformed message: {0}")]
    MalformedMessage(String),

    /// Two locally maintained replicas of the same node's auxiliary state
    /// drifted apart; the synchronous broadcast contract is broken.
    #[error("replica divergence at node {node}, round {round}: max |diff| = {max_abs:.3e}")]
    ReplicaDivergence {
        node: usize,
        round: u64,
        max_abs: f64,
    },

    /// An objective was constructed with no data points.
    #[error("objective dataset is empty")]
    EmptyDataset,

    /// A log-domain rate fit was requested over values that are not
    /// strictly positive.
    #[error("rate fit window for column '{column}' contains non-positive values")]
    NonPositiveValues { column: String },

    /// A configuration field failed validation.
    #[error("invalid config field '{field}': {reason}")]
    ConfigInvalid { field: &'static str, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
