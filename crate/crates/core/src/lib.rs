//! Mean curvature flow of closed curves in `Rⁿ` (arbitrary codimension).
//!
//! The flow is evolved through the coupled system for the tangent projection
//! `π` and the curvature vector `H`, discretized with periodic Lagrange
//! finite elements on the moving curve and linearly implicit BDF time
//! stepping. Each step solves one SPD system `δ₀M + τA` per scalar
//! component, all sharing one factorization.

pub mod analysis;
pub mod assembly;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod mesh;
pub mod refelem;
pub mod sparse;
pub mod stepper;
pub mod verify;
