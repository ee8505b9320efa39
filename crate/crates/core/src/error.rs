use thiserror::Error;

use crate::protocol::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("unknown subsystem `{0}`")]
    UnknownSubsystem(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("state is not normalized (norm = {norm})")]
    NotNormalized { norm: f64 },

    #[error("operator is not unitary (max deviation {deviation:e})")]
    NotUnitary { deviation: f64 },

    #[error("states are not orthonormal (max deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    #[error("family does not span the target space ({found} of {expected} states)")]
    Incomplete { expected: usize, found: usize },

    #[error("protocol is invalid: {}", join_diagnostics(.0))]
    InvalidProtocol(Vec<Diagnostic>),

    #[error("protocol has no registered measurement events")]
    NoRegisteredEvents,

    #[error("unknown outcome `{0}`")]
    UnknownOutcome(String),

    #[error("outcome sequence has {actual} entries, expected {expected}")]
    OutcomeLength { expected: usize, actual: usize },

    #[error("invalid slot selection: {0}")]
    InvalidSlots(String),

    #[error("no event at or before time {0}")]
    TimeBeforeEvents(f64),

    #[error("protocol shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("scenario configuration error: {0}")]
    Config(String),

    #[error("consistency check failed: {0}")]
    Consistency(String),
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
