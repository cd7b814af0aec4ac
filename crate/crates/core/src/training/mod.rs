//! Regression training, datasets, outer optimizers, bound annealing and the
//! spectral-normalization baseline.

mod anneal;
mod data;
mod loss;
mod optim;
mod sn;
mod trainer;

pub use anneal::{anneal_step, AnnealState};
pub use data::{
    make_exp_dataset, make_linear_dataset, make_step_dataset, test_grid, Dataset1D, Target,
    TEST_POINTS, TEST_RANGE, TRAIN_POINTS, TRAIN_RANGE,
};
pub use loss::{bce, loss_and_grad, LossKind, BCE_CLAMP};
pub use optim::{OptimizerState, OuterOptimizer};
pub use sn::{sn_normalize, SnLayer, SnMlp};
pub use trainer::{
    empirical_constants, evaluate_mse, train_regression, train_regression_with, write_metrics_csv,
    BlnnRegressor, EpochRecord, EvalConfig, SampleGrad, TrainConfig, TrainReport, Trainable,
};
