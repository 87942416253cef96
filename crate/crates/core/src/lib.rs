//! Spectral diagnostics for hidden-state trajectories.
//!
//! * [`spectral`] tracks sliding-window effective rank and flags collapse.
//! * [`manifold`] estimates the local dominant subspace from look-ahead
//!   samples through the small Gram matrix.
//! * [`probe`] scores candidate latents by their residual outside that
//!   subspace and picks the most orthogonal one.
//! * [`sim`] is a synthetic attention system for rank-collapse and
//!   injection experiments.
//! * [`pipeline`] drives truncate / estimate / select / resume against
//!   external generation backends.
//! * [`eval`] holds the Pass@k, exploration-efficiency and ablation metrics.
//! * [`io`] and [`cli`] cover file formats and the `soe` command line.

pub mod cli;
pub mod error;
pub mod eval;
pub mod exec;
pub mod io;
pub mod linalg;
pub mod manifold;
pub mod pipeline;
pub mod probe;
pub mod sim;
pub mod spectral;

pub use error::{Error, Result};
pub use exec::Execution;
pub use linalg::{Matrix, SymEig};
pub use manifold::{BiasManifold, MCSampleSet};
pub use probe::{ProbeCandidate, ProbeSelection};
pub use sim::SimConfig;
pub use spectral::{CollapseReport, StateTrajectory};
