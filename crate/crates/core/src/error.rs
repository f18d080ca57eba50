use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("direction vector is not unit length (norm = {0})")]
    NonUnitVector(f64),

    #[error("degree {requested} exceeds the supported maximum {max}")]
    DegreeTooHigh { requested: usize, max: usize },

    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("path ({0}, {1}, {2}) violates the triangle rule")]
    TriangleViolation(usize, usize, usize),

    #[error("atoms {i} and {j} coincide (distance {dist:e} Å)")]
    CoincidentAtoms { i: usize, j: usize, dist: f64 },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("solver diverged at step {step} (residual {residual:e})")]
    Diverged { step: usize, residual: f64 },

    #[error("solver did not converge in {steps} steps (residual {residual:e}, tolerance {tolerance:e})")]
    Unconverged {
        steps: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("zero range: all values equal to {0}")]
    ZeroRange(f64),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
