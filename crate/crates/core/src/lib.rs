//! Numerical laboratory for the spatially homogeneous Landau equation with
//! hard potentials: exact collision coefficients, weighted transport costs,
//! the weak-form and coupling generators with their inequality checks,
//! moment machinery, and N-particle mean-field simulators.

pub mod generators;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod moments;
pub mod rng;
pub mod sampler;
pub mod simulator;
pub mod transport;
pub mod verify;

pub use kernel::Gamma;
pub use linalg::{Mat3, Vec3};
pub use transport::{CostParams, DiscreteMeasure};
