//! Bi-Lipschitz networks: forward pass through the conjugate argmax and
//! implicit backward passes.

mod blnn;
mod bundle;
mod cache;
mod composite;
mod partial;

pub use blnn::{
    conjugate_map, Blnn, BlnnConfig, BlnnObjective, DiagonalWeights, ForwardTrace,
    STATIONARITY_SLACK,
};
pub use bundle::ModelBundle;
pub use cache::{SampleKey, WarmCache, POINT_MATCH_RADIUS};
pub use composite::{CompositeBlnn, CompositeGrad, CompositeTrace};
pub use partial::{PartialObjective, PartialTrace, Pblnn, PblnnGrad};
