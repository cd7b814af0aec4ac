//! Bi-Lipschitz networks built from input-convex networks and the
//! Legendre-Fenchel transform.
//!
//! An `(α, β)` network computes `f(x) = argmax_y {⟨y, x⟩ − G(y) − ‖y‖²/(2β)} + αx`
//! where `G` is an input-convex network. The map is `α`-inverse-Lipschitz and
//! `(α + β)`-Lipschitz by construction.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convexnet;
pub mod duq;
pub mod error;
pub mod estimator;
pub mod lft;
pub mod model;
pub mod training;

pub use error::{Error, Result};
