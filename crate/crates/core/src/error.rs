use thiserror::Error;

use crate::lattice::NodeCoord;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("grid radius must be at least 1, got {0}")]
    InvalidRadius(u32),
    #[error("removal fraction {0} outside [0, 0.5)")]
    InvalidFraction(f64),
    #[error("no connected environment with p = {p} after {attempts} attempts")]
    NotConnected { p: f64, attempts: usize },
    #[error("node {0} is not on the grid")]
    NodeOutside(NodeCoord),
    #[error("link id {0} out of range (grid has {1} links)")]
    UnknownLink(usize, usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("source {0} is not on the grid")]
    SourceOutside(NodeCoord),
    #[error("source {0} is an absorbing boundary node")]
    SourceOnBoundary(NodeCoord),
    #[error("source {0} cannot reach the absorbing boundary")]
    SourceTrapped(NodeCoord),
    #[error("release rate must be positive, got {0}")]
    InvalidReleaseRate(f64),
    #[error("removal fraction {0} outside [0, 0.5)")]
    AboveThreshold(f64),
    #[error("(I - Q) is singular")]
    Singular,
}

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("all particle weights vanished at step {step}")]
    Divergence { step: usize },
    #[error("particle set is empty")]
    Empty,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error, PartialEq, Clone, Copy)]
#[error("detection probabilities must satisfy 0 <= p_fa < p_d <= 1 (p_d = {p_d}, p_fa = {p_fa})")]
pub struct InvalidDetection {
    pub p_d: f64,
    pub p_fa: f64,
}
