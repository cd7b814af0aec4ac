//! Deterministic uncertainty estimation: an RBF head with EMA centroids on
//! top of a bi-Lipschitz feature extractor.

mod head;
mod metrics;
mod moons;
mod train;

pub use head::{DuqHead, DuqHeadConfig, DuqLossGrad};
pub use metrics::auroc;
pub use moons::{padded_bounds, two_moons, MoonsConfig};
pub use train::{
    accuracy, train_duq, write_grid_csv, DuqReport, DuqTrainConfig, Extractor, ExtractorCaches,
    ExtractorTrace, GridPoint,
};
