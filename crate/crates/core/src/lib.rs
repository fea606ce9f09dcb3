//! Feedback-assisted quantum search on cycle graphs.
//!
//! A walker evolves under the cycle-graph Laplacian while its position is
//! continuously monitored through two homodyne channels. After every
//! measurement step a unitary built from per-edge hopping couplings is chosen
//! to maximise the overlap with a target node. The crate provides the dense
//! linear algebra, the stochastic conditional update, the unconditional
//! master equation, the feedback optimizers and a reproducible parallel
//! ensemble runner.
//!
//! Times are dimensionless (`γt`) and couplings are expressed in units of the
//! hopping rate `γ`.

pub mod ensemble;
pub mod error;
pub mod feedback;
pub mod graph;
pub mod lindblad;
pub mod monitoring;
pub mod optimize;
pub mod qcore;

pub use error::{Error, Result};
