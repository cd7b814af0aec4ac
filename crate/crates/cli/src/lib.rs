//! Desk-scale experiments for bi-Lipschitz networks and the plumbing that
//! writes their results to disk.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod experiments;
pub mod output;
pub mod stats;

pub use output::{Outcome, RunDir};
