use thiserror::Error;

use crate::types::RobotId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("distance matrix incomplete, missing pairs {missing:?}")]
    IncompleteDistanceMatrix { missing: Vec<(RobotId, RobotId)> },
    #[error("gravity underconstrained (constraint rank {rank})")]
    GravityUnderconstrained { rank: usize },
    #[error("direction pairs are all parallel")]
    DegenerateDirections,
    #[error("bearing parallel to gravity, yaw undefined")]
    YawDegenerate,
    #[error("reference robot rotation is unobservable")]
    ReferenceUnobservable,
    #[error("chirality undetermined")]
    ChiralityUndetermined,
    #[error("timestamps are not strictly increasing")]
    NonMonotoneTimestamps,
    #[error("preintegration intervals differ: {0} s vs {1} s")]
    IntervalMismatch(f64, f64),
    #[error("no single-frame output inside the window")]
    InsufficientConstraints,
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("window matches several ids: {0:?}")]
    AmbiguousCode(Vec<u32>),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
