//! Inertial primal-dual dynamics for separable convex problems with linear
//! equality constraints, with Lyapunov-energy auditing and rate estimation.

pub mod analysis;
pub mod cli;
pub mod damping;
pub mod dynamics;
pub mod integrate;
pub mod linalg;
pub mod lyapunov;
pub mod problem;
