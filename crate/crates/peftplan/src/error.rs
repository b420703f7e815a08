//! Shared error type for the planning library.

use thiserror::Error;

/// Errors surfaced by the planner, simulator and file loaders.
#[derive(Debug, Error)]
pub enum PlanError {
    /// The workload failed structural validation; the report carries the
    /// per-field diagnostics.
    #[error("workload rejected: {0}")]
    InvalidWorkload(String),

    /// An operator id used by the workload has no samples in the profile
    /// table.
    #[error("unknown operator id '{0}' (not present in the profile table)")]
    UnknownOperator(String),

    /// No plan satisfies the per-GPU memory limit.
    #[error("infeasible: memory ({0})")]
    InfeasibleMemory(String),

    /// A malformed input file (profile table, workload, trace or plan).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Fusing adapters produced a cyclic dependency; the offending edge is
    /// reported as (from, to) subgraph ids.
    #[error("dependency cycle introduced by fusion at edge {0} -> {1}")]
    FusionCycle(usize, usize),

    /// Caller passed arguments that violate an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Underlying JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used across the crate.
pub type PlanResult<T> = Result<T, PlanError>;
