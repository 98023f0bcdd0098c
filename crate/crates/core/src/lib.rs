//! Autonomous search for a diffusive tracer source on an obstructed lattice.
//!
//! * [`lattice`]: complete grid, random environments, link observability.
//! * [`diffusion`]: exact ground-truth field via an absorbing Markov chain.
//! * [`analytic`]: map-independent concentration model used for estimation.
//! * [`sensing`]: count sensor, link detector, noisy motion, map evolution.
//! * [`rbpf`]: Rao-Blackwellised particle filter over path, source, map and rate.
//! * [`control`]: myopic information-gain control with anti-oscillation.
//! * [`harness`]: full search runs, Monte Carlo batches, persistence.

pub mod analytic;
pub mod control;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod rbpf;
pub mod sensing;
mod special;

pub use analytic::{DomainGeom, Point2, SourceParams};
pub use control::{ControlDecision, VisitHistory};
pub use diffusion::{CanonicalChain, ConcentrationField};
pub use error::{FieldError, FilterError, HarnessError, LatticeError};
pub use harness::{ExperimentSummary, Outcome, RunRecord, SearchConfig};
pub use lattice::{CompleteGrid, EnvironmentMap, NodeCoord};
pub use rbpf::{Particle, ParticleSet, PosteriorSummary};
pub use sensing::{Control, DetectionMatrix, LinkObservation};
