//! State-constrained infinite-horizon feedback synthesis through
//! parametrized Riccati equations.
//!
//! The library solves the Riccati sweep for a given outer-player policy
//! `alpha`, checks inward-pointing conditions on the constraint set,
//! simulates the resulting feedback, and evaluates the game value
//! `W = sup_alpha W^alpha` by a coupled fixed point. A dynamic-programming
//! oracle provides independent reference values on small grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constraints;
pub mod error;
pub mod game;
pub mod io;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod riccati;
pub mod synthesis;

pub use constraints::{sample_boundary, BoundarySample, ConeQuery, ConstraintSet, IpcReport};
pub use error::{Error, Result};
pub use game::{solve_coupled, CoupledOptions, GameSolution};
pub use model::{build_problem, AlphaPolicy, AlphaTail, ProblemSpec};
pub use numerics::{Mat, SymMatrix, TimeGrid, Vector};
pub use riccati::{solve_finite_horizon, solve_stabilizing, RiccatiSolution, StabilizingOptions};
pub use synthesis::{simulate_closed_loop, Trajectory};
