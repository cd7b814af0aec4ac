use std::io::Write;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset1D;
use super::loss::{loss_and_grad, LossKind};
use super::optim::{OptimizerState, OuterOptimizer};
use super::sn::SnMlp;
use crate::convexnet::Parameters;
use crate::error::{Error, Result};
use crate::estimator::{estimate_bilip, Domain, SamplerConfig};
use crate::lft::SolverConfig;
use crate::model::{Blnn, BlnnConfig, SampleKey, WarmCache};

/// Loss and flat parameter gradient for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub lft_iters: usize,
    pub converged: bool,
}

/// A model the regression loop can train.
pub trait Trainable: Sync {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]);
    /// Restores parameter constraints after an optimizer update.
    fn after_step(&mut self) {}
    fn predict(&self, x: &DVector<f64>, solver: &SolverConfig) -> Result<DVector<f64>>;
    fn sample_grad(
        &self,
        index: usize,
        x: &DVector<f64>,
        target: &DVector<f64>,
        loss: LossKind,
        solver: &SolverConfig,
    ) -> Result<SampleGrad>;
    /// The Lipschitz constant the architecture guarantees.
    fn lipschitz_bound(&self) -> f64;
}

/// A BLNN together with the warm-start cache it trains with.
#[derive(Debug)]
pub struct BlnnRegressor {
    pub model: Blnn,
    pub cache: WarmCache,
}

impl BlnnRegressor {
    pub fn new(model: Blnn) -> Self {
        BlnnRegressor {
            model,
            cache: WarmCache::new(),
        }
    }

    /// Keeps `α` and moves `β` so that `α + β = bound`.
    pub fn set_lipschitz_bound(&mut self, bound: f64) -> Result<()> {
        let alpha = self.model.config.alpha;
        self.model
            .set_config(BlnnConfig::new(alpha, bound - alpha)?)
    }
}

impl Trainable for BlnnRegressor {
    fn params(&self) -> Vec<f64> {
        self.model.core.to_flat()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.model.core.set_flat(flat);
    }

    fn after_step(&mut self) {
        self.model.core.project_nonneg();
    }

    fn predict(&self, x: &DVector<f64>, solver: &SolverConfig) -> Result<DVector<f64>> {
        self.model.forward_value(x, solver)
    }

    fn sample_grad(
        &self,
        index: usize,
        x: &DVector<f64>,
        target: &DVector<f64>,
        loss: LossKind,
        solver: &SolverConfig,
    ) -> Result<SampleGrad> {
        let (out, trace) =
            self.model
                .forward(x, solver, Some((&self.cache, SampleKey::Index(index))))?;
        let (value, g) = loss_and_grad(loss, &out, target)?;
        let grad = self.model.backward_params(&trace, &g)?.to_flat();
        Ok(SampleGrad {
            loss: value,
            grad,
            lft_iters: trace.lft.iters,
            converged: trace.lft.converged,
        })
    }

    fn lipschitz_bound(&self) -> f64 {
        self.model.config.bounds().1
    }
}

impl Trainable for SnMlp {
    fn params(&self) -> Vec<f64> {
        SnMlp::params(self)
    }

    fn set_params(&mut self, flat: &[f64]) {
        SnMlp::set_params(self, flat);
    }

    fn after_step(&mut self) {
        self.renormalize();
    }

    fn predict(&self, x: &DVector<f64>, _solver: &SolverConfig) -> Result<DVector<f64>> {
        self.forward(x)
    }

    fn sample_grad(
        &self,
        _index: usize,
        x: &DVector<f64>,
        target: &DVector<f64>,
        loss: LossKind,
        _solver: &SolverConfig,
    ) -> Result<SampleGrad> {
        let out = self.forward(x)?;
        let (value, g) = loss_and_grad(loss, &out, target)?;
        let (_, grad) = self.forward_backward(x, &g)?;
        Ok(SampleGrad {
            loss: value,
            grad,
            lft_iters: 0,
            converged: true,
        })
    }

    fn lipschitz_bound(&self) -> f64 {
        SnMlp::lipschitz_bound(self)
    }
}

/// How often and where the empirical constants are measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Measure every this many epochs (and always after the last one).
    pub every: usize,
    pub lo: f64,
    pub hi: f64,
    pub n_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: 1,
            lo: -1.0,
            hi: 1.0,
            n_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OuterOptimizer,
    pub solver: SolverConfig,
    pub loss: LossKind,
    pub seed: u64,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        self.optimizer.validate()?;
        self.solver.validate()
    }
}

/// One row of the per-epoch metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    pub lip_hat: Option<f64>,
    pub invlip_hat: Option<f64>,
    pub mean_lft_iters: f64,
    pub bound: f64,
    /// Samples whose inner solve stopped at `max_iters`.
    pub nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_params: Vec<f64>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// First 1-based epoch whose loss is below `threshold`.
    pub fn first_epoch_below(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.loss < threshold)
            .map(|e| e.epoch)
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Writes `epoch, loss, lip_hat, invlip_hat, mean_lft_iters, bound`.
pub fn write_metrics_csv<W: Write>(records: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "loss",
        "lip_hat",
        "invlip_hat",
        "mean_lft_iters",
        "bound",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            opt(r.lip_hat),
            opt(r.invlip_hat),
            r.mean_lft_iters.to_string(),
            r.bound.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Empirical constants of a 1-D model over `n_samples` points of `[lo, hi]`.
pub fn empirical_constants<M: Trainable>(
    model: &M,
    solver: &SolverConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let sampler = SamplerConfig::new(Domain::cube(1, eval.lo, eval.hi), eval.n_samples, seed);
    let est = estimate_bilip(|x| model.predict(x, solver), &sampler)?;
    Ok((est.lip_hat, est.invlip_hat))
}

/// Mean squared error over a dataset.
pub fn evaluate_mse<M: Trainable>(
    model: &M,
    data: &Dataset1D,
    solver: &SolverConfig,
) -> Result<f64> {
    let errs = data
        .xs
        .par_iter()
        .zip(&data.ys)
        .map(|(x, y)| Ok((model.predict(&DVector::from_vec(vec![*x]), solver)?[0] - y).powi(2)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

pub fn train_regression<M: Trainable>(
    model: &mut M,
    data: &Dataset1D,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_regression_with(model, data, cfg, |_, _| Ok(()))
}

/// The training loop. `hook` runs after every epoch's metrics are recorded
/// and may adjust the model (annealing uses it to relax the bound).
pub fn train_regression_with<M, H>(
    model: &mut M,
    data: &Dataset1D,
    cfg: &TrainConfig,
    mut hook: H,
) -> Result<TrainReport>
where
    M: Trainable,
    H: FnMut(&mut M, &mut EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let xs: Vec<DVector<f64>> = data
        .xs
        .iter()
        .map(|x| DVector::from_vec(vec![*x]))
        .collect();
    let ys: Vec<DVector<f64>> = data
        .ys
        .iter()
        .map(|y| DVector::from_vec(vec![*y]))
        .collect();
    let mut params = model.params();
    let mut opt = OptimizerState::new(cfg.optimizer, params.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut iter_sum = 0usize;
        let mut nonconverged = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let grads = batch
                .par_iter()
                .map(|&i| model.sample_grad(i, &xs[i], &ys[i], cfg.loss, &cfg.solver))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| wrap_divergence(e, epoch))?;
            let mut total = vec![0.0; params.len()];
            for g in &grads {
                loss_sum += g.loss;
                iter_sum += g.lft_iters;
                nonconverged += usize::from(!g.converged);
                for (t, v) in total.iter_mut().zip(&g.grad) {
                    *t += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            total.iter_mut().for_each(|t| *t *= scale);
            opt.step(&mut params, &total)?;
            model.set_params(&params);
            model.after_step();
            params = model.params();
        }
        let n = data.len() as f64;
        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            lip_hat: None,
            invlip_hat: None,
            mean_lft_iters: iter_sum as f64 / n,
            bound: model.lipschitz_bound(),
            nonconverged,
        };
        if let Some(eval) = &cfg.eval {
            if (eval.every > 0 && epoch % eval.every == 0) || epoch == cfg.epochs {
                let (lip, invlip) = empirical_constants(
                    model,
                    &cfg.solver,
                    eval,
                    cfg.seed.wrapping_add(epoch as u64),
                )
                .map_err(|e| wrap_divergence(e, epoch))?;
                record.lip_hat = Some(lip);
                record.invlip_hat = Some(invlip);
            }
        }
        hook(model, &mut record)?;
        params = model.params();
        records.push(record);
    }
    Ok(TrainReport {
        epochs: records,
        final_params: params,
    })
}

fn wrap_divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { .. } | Error::NotStationary { .. } | Error::SingularHessian { .. } => {
            Error::TrainingDivergence {
                epoch,
                source: Box::new(e),
            }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexnet::{init_icnn, ActivationKind, InitScheme};
    use crate::training::data::make_linear_dataset;

    fn small_blnn(alpha: f64, beta: f64, seed: u64) -> BlnnRegressor {
        let core = init_icnn(
            1,
            &[8, 8],
            ActivationKind::Softplus,
            InitScheme::XavierClamp,
            seed,
        )
        .unwrap();
        BlnnRegressor::new(Blnn::new(core, BlnnConfig::new(alpha, beta).unwrap()).unwrap())
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            optimizer: OuterOptimizer::adam(0.01),
            solver: SolverConfig::newton(1e-9, 100),
            loss: LossKind::Mse,
            seed: 4,
            eval: Some(EvalConfig {
                every: 2,
                n_samples: 50,
                ..EvalConfig::default()
            }),
        }
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let data = make_linear_dataset(2.0, 40, -1.0, 1.0, 0).unwrap();
        let a = train_regression(&mut small_blnn(0.5, 3.0, 1), &data, &config(3)).unwrap();
        let b = train_regression(&mut small_blnn(0.5, 3.0, 1), &data, &config(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.epochs.len(), 3);
        assert!(
            a.epochs[0].lip_hat.is_none()
                && a.epochs[1].lip_hat.is_some()
                && a.epochs[2].lip_hat.is_some()
        );
    }

    #[test]
    fn gates_stay_nonnegative_and_loss_falls() {
        let data = make_linear_dataset(2.0, 40, -1.0, 1.0, 0).unwrap();
        let mut m = small_blnn(0.5, 3.0, 2);
        let report = train_regression_with(&mut m, &data, &config(10), |m, _| {
            assert!(m.model.core.min_gate_weight().unwrap_or(0.0) >= 0.0);
            Ok(())
        })
        .unwrap();
        let losses = report.losses();
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(m.cache.len(), 40);
        let (lip, invlip) = (
            report.last().lip_hat.unwrap(),
            report.last().invlip_hat.unwrap(),
        );
        assert!(invlip >= 0.5 - 1e-6 && lip <= 3.5 + 1e-6);
    }

    #[test]
    fn bound_can_be_moved() {
        let mut m = small_blnn(0.0, 2.0, 0);
        m.set_lipschitz_bound(3.0).unwrap();
        assert_eq!(m.lipschitz_bound(), 3.0);
        assert!(m.set_lipschitz_bound(0.0).is_err());
    }

    #[test]
    fn sn_baseline_trains() {
        let data = make_linear_dataset(1.0, 40, -1.0, 1.0, 0).unwrap();
        let mut m = SnMlp::new(&[1, 8, 8, 1], 2.0, 0).unwrap();
        let before = evaluate_mse(&m, &data, &SolverConfig::newton(1e-8, 10)).unwrap();
        train_regression(&mut m, &data, &config(20)).unwrap();
        let after = evaluate_mse(&m, &data, &SolverConfig::newton(1e-8, 10)).unwrap();
        assert!(after < before);
    }

    #[test]
    fn metrics_csv_layout() {
        let rec = EpochRecord {
            epoch: 1,
            loss: 0.5,
            lip_hat: Some(2.0),
            invlip_hat: None,
            mean_lft_iters: 3.0,
            bound: 4.0,
            nonconverged: 0,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,loss,lip_hat,invlip_hat,mean_lft_iters,bound\n1,0.5,2,,3,4\n"
        );
    }
}
