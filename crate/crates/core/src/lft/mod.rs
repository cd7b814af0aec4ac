//! Conjugate-argmax solvers and bounds on their iterates.

mod bounds;
mod objective;
mod solver;

pub use bounds::{
    gd_error_bound_smooth, gd_lipschitz_bound, gd_lipschitz_bounds, rough_bilip_bounds,
};
pub use objective::{estimate_smoothness, max_curvature, ConvexObjective, QuadraticObjective};
pub(crate) use solver::condition_estimate;
pub use solver::{
    solve_lft, solve_lft_observed, solve_lft_traced, write_trace_csv, AdaptiveParams, LftResult,
    SolverConfig, SolverKind, SolverState, StepPolicy, TraceRow, DIVERGENCE_NORM,
};
