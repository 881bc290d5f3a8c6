use std::io;

use thiserror::Error;

/// Errors raised by the synchronization kernels, solvers and file loaders.
#[derive(Debug, Error)]
pub enum SyncError {
    #[error("matrix sign undefined: input is singular or ill-conditioned (sigma_min = {sigma_min:e}, sigma_max = {sigma_max:e}){}", block_suffix(*.block))]
    SingularInput {
        block: Option<usize>,
        sigma_min: f64,
        sigma_max: f64,
    },

    #[error("Newton-Schulz iterate diverged at step {step} (Frobenius norm {norm:e}){}", block_suffix(*.block))]
    DivergenceDetected {
        block: Option<usize>,
        step: usize,
        norm: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("eigensolver failure: {0}")]
    EigSolverFailure(String),

    #[error("objective is not finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("ground truth required for this operation")]
    TruthRequired,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("edge ({i}, {j}) listed twice with inconsistent blocks")]
    DuplicateEdge { i: usize, j: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence {sequence}: {source}")]
    InSequence {
        sequence: usize,
        #[source]
        source: Box<SyncError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn block_suffix(block: Option<usize>) -> String {
    match block {
        Some(b) => format!(" at block {}", b + 1),
        None => String::new(),
    }
}

impl SyncError {
    /// Attach a (0-based) block index to block-level numerical errors.
    pub fn at_block(self, index: usize) -> Self {
        match self {
            SyncError::SingularInput {
                sigma_min,
                sigma_max,
                ..
            } => SyncError::SingularInput {
                block: Some(index),
                sigma_min,
                sigma_max,
            },
            SyncError::DivergenceDetected { step, norm, .. } => SyncError::DivergenceDetected {
                block: Some(index),
                step,
                norm,
            },
            other => other,
        }
    }

    /// Tag an error with the solver sequence it came from (0 = main sequence).
    pub fn in_sequence(self, sequence: usize) -> Self {
        SyncError::InSequence {
            sequence,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            SyncError::SingularInput { .. }
            | SyncError::DivergenceDetected { .. }
            | SyncError::EigSolverFailure(_)
            | SyncError::NonFiniteObjective { .. } => true,
            SyncError::InSequence { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Block index carried by the error, if any (0-based).
    pub fn block(&self) -> Option<usize> {
        match self {
            SyncError::SingularInput { block, .. } | SyncError::DivergenceDetected { block, .. } => {
                *block
            }
            SyncError::InSequence { source, .. } => source.block(),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, SyncError>;
