use thiserror::Error;

/// Errors produced by the planning library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate path input: {0}")]
    DegenerateInput(String),

    #[error("steering angle {0} rad is at or beyond the tan() singularity (|delta| >= pi/2)")]
    SteeringSingularity(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("anchor point is {dist:.1} m from the path (limit {limit:.1} m)")]
    FarFromPath { dist: f64, limit: f64 },

    #[error("planner failed: {0}")]
    PlanFailure(String),

    #[error("empty simulation log")]
    EmptyLog,

    #[error("scenario validation failed: {0}")]
    Validation(String),

    #[error("failed to parse scenario: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
