//! Matrix-free Bayesian D-optimal sensor placement for linear inverse
//! problems governed by a time-dependent advection–diffusion equation.

pub mod error;
pub mod fem;
pub mod inverse;
pub mod linalg;
pub mod oed;
pub mod optimize;
pub mod prior;
pub mod problem;
pub mod sketch;
pub mod transport;

pub use error::{Error, Result};
pub use oed::{DesignCriterion, Evaluation, NoiseModel, OedProblem};
pub use problem::{sensor_grid, BuiltProblem, ProblemSpec};
pub use sketch::SketchConfig;
