use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("eigensolver failed for mode {mode}: {reason}")]
    EigenNonConvergence { mode: usize, reason: String },

    #[error("eigenvalue bracket violated for mode {mode}: lambda = {lambda:.12e} not in [{lower:.12e}, {upper:.12e}]")]
    BracketViolation {
        mode: usize,
        lambda: f64,
        lower: f64,
        upper: f64,
    },

    #[error("input coefficient identity violated at mode {mode}: trace formula {trace:.12e}, projection formula {projection:.12e}")]
    BetaIdentity {
        mode: usize,
        trace: f64,
        projection: f64,
    },

    #[error("tail remainder {remainder:.3e} exceeds 10% of partial sum {partial:.3e} (n_tail = {n_tail})")]
    TailRemainder {
        remainder: f64,
        partial: f64,
        n_tail: usize,
    },

    #[error("negative Parseval tail {value:.3e} beyond tolerance")]
    NegativeTail { value: f64 },

    #[error("Hurwitz margin violated for {block}: spectral abscissa {abscissa:.6e} is not below -delta = {neg_delta:.6e}")]
    HurwitzMargin {
        block: String,
        abscissa: f64,
        neg_delta: f64,
    },

    #[error("pole placement failed: {0}")]
    PolePlacement(String),

    #[error("Lyapunov equation: {0}")]
    Lyapunov(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("not enough modes: {0}")]
    NotEnoughModes(String),

    #[error("sector nonlinearity: {0}")]
    Sector(String),

    #[error("root bracket failure: {0}")]
    RootBracket(String),

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("search exhausted: {0}")]
    SearchExhausted(String),
}

pub type Result<T> = std::result::Result<T, Error>;
