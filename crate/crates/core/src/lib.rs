//! Registration of 3D volumes driven by Euclidean distance maps.
//!
//! The toolkit turns binary anatomical masks into exact Euclidean distance
//! maps ([`edt`]) and aligns a template volume to a reference volume by
//! minimizing a normalized-gradient-field distance plus a curvature
//! regularizer ([`objective`]) with L-BFGS ([`solver`]). Registration runs a
//! rigid stage on a coarser pyramid level followed by a multilevel dense
//! displacement stage ([`pipeline`]). Landmark target registration error is
//! computed and tabulated by [`metrics`].
//!
//! The runnable programs under `examples/` show each capability end to end;
//! the `edtreg` binary wraps the same functionality as subcommands.

// `!(x > 0.0)` is used on purpose so NaN lands in the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod edt;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod solver;
pub mod synth;
pub mod transform;

mod par;
pub mod precond;

pub use edt::{edt3, DistanceMap, EdtMode};
pub use error::{Error, Result};
pub use grid::{Grid, Mask3D, Pyramid, Volume3D};
pub use metrics::{tre, Landmark, LandmarkSet, TreReport};
pub use objective::ObjectiveSettings;
pub use pipeline::{register, RegistrationConfig, RegistrationResult};
pub use solver::{lbfgs_minimize, lbfgs_minimize_with, Preconditioner, SolveReport, SolverOptions};
pub use transform::{DeformationField, Matrix44, RigidParams};

/// World-space point or vector in millimetres.
pub type Vec3 = nalgebra::Vector3<f64>;
