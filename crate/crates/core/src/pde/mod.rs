//! Lattice solvers for the master equation and its closed-form nestings.

mod grid;
mod nesting;
mod solver;

pub use grid::GridField;
pub use nesting::*;
pub use solver::{
    dgp_residual, linear_residual, steady_state_dgp, steady_state_dgp_detailed,
    steady_state_linear, steady_state_linear_from, transient, Boundary, DgpSolution, SolverOptions,
    TimeSource,
};
