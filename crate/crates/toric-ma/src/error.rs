//! Crate-wide error type.
//!
//! The CLI maps these onto process exit codes: invalid input data -> 2,
//! numeric non-convergence or divergent integrals -> 3, capacity and
//! unsupported-dimension guards -> 4.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Malformed or inconsistent input data (polytopes, potentials, measures).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The half-space data does not cut out a bounded, full-dimensional polytope.
    #[error("degenerate polytope: {0}")]
    DegeneratePolytope(String),

    /// Geometric kernels are implemented for ambient dimension 1 and 2 only.
    #[error("unsupported dimension {0}: geometric kernels cover n = 1, 2")]
    DimensionUnsupported(usize),

    /// Evaluation at a point where the requested quantity is not defined,
    /// e.g. the moment map of a max-affine potential on a kink. Carries the
    /// indices of the tied affine pieces; callers wanting a set-valued
    /// answer can ask for the subdifferential hull instead.
    #[error("not differentiable at the requested point (tied pieces: {tied:?})")]
    NotDifferentiable { tied: Vec<usize> },

    /// Restricting the dual to {p >= lambda} left nothing.
    #[error("empty envelope: no part of the dual domain satisfies p >= lambda")]
    EmptyEnvelope,

    /// A Hilbert-map entry fails to converge (slope on the boundary of the
    /// dual hull in volume mode, or a non-integrable canonical measure).
    #[error("divergent integral for basis entry {index}")]
    Divergent { index: usize },

    /// A continuum integral diverges (e.g. e^(-phi) dx when 0 is not
    /// interior to the slope hull).
    #[error("divergent integral: {0}")]
    DivergentIntegral(String),

    /// An iteration exhausted its budget before reaching the tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// Desk-scale capacity guard tripped (atom counts, basis sizes, k).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
