use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("mesh is disconnected: component of {size} vertices containing vertex {vertex} is isolated from vertex 0")]
    DisconnectedMesh { vertex: usize, size: usize },

    #[error("Gibbs kernel underflows on row {row}: every off-diagonal entry is below the smallest normal float (min cost {min_cost} / epsilon {epsilon}); increase epsilon")]
    KernelUnderflow {
        row: usize,
        min_cost: f64,
        epsilon: f64,
    },

    #[error("numerical failure at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("coordinate {index} diverged ({value})")]
    DivergentCoordinate { index: usize, value: f64 },

    #[error("objective increased from {previous} to {current} at outer iteration {iteration}")]
    ObjectiveIncrease {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
