use std::io::Write;

use nalgebra::DVector;
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::DuqHead;
use super::metrics::auroc;
use super::moons::padded_bounds;
use crate::convexnet::{init_icnn, ActivationKind, IcnnGrad, InitScheme, Parameters};
use crate::error::{Error, Result};
use crate::lft::SolverConfig;
use crate::model::{
    Blnn, BlnnConfig, CompositeBlnn, CompositeTrace, ForwardTrace, SampleKey, WarmCache,
};
use crate::training::{OptimizerState, OuterOptimizer};

/// Feature network in front of the DUQ head.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Single(Blnn),
    Composite(CompositeBlnn),
}

#[derive(Debug, Clone)]
pub enum ExtractorTrace {
    Single(ForwardTrace),
    Composite(CompositeTrace),
}

/// One warm cache per network stage.
#[derive(Debug, Default)]
pub struct ExtractorCaches {
    pub first: WarmCache,
    pub second: WarmCache,
}

impl Extractor {
    /// A two-stage extractor `input → input → output` with identical
    /// `(α, β)` and hidden widths on both stages.
    pub fn composite(
        input: usize,
        output: usize,
        hidden: &[usize],
        config: BlnnConfig,
        seed: u64,
    ) -> Result<Self> {
        let first = init_icnn(
            input,
            hidden,
            ActivationKind::Softplus,
            InitScheme::XavierClamp,
            seed,
        )?;
        let second = init_icnn(
            output,
            hidden,
            ActivationKind::Softplus,
            InitScheme::XavierClamp,
            seed.wrapping_add(1),
        )?;
        Ok(Extractor::Composite(CompositeBlnn::new(
            Blnn::new(first, config.clone())?,
            Blnn::new(second, config)?,
        )))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Extractor::Single(m) => m.dim(),
            Extractor::Composite(c) => c.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Extractor::Single(m) => m.dim(),
            Extractor::Composite(c) => c.output_dim(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Extractor::Single(m) => m.core.to_flat(),
            Extractor::Composite(c) => {
                let mut p = c.first.core.to_flat();
                p.extend(c.second.core.to_flat());
                p
            }
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        match self {
            Extractor::Single(m) => m.core.set_flat(flat),
            Extractor::Composite(c) => {
                let n = c.first.core.num_params();
                c.first.core.set_flat(&flat[..n]);
                c.second.core.set_flat(&flat[n..]);
            }
        }
    }

    pub fn project_nonneg(&mut self) {
        match self {
            Extractor::Single(m) => m.core.project_nonneg(),
            Extractor::Composite(c) => {
                c.first.core.project_nonneg();
                c.second.core.project_nonneg();
            }
        }
    }

    pub fn forward(
        &self,
        x: &DVector<f64>,
        solver: &SolverConfig,
        warm: Option<(&ExtractorCaches, SampleKey)>,
    ) -> Result<(DVector<f64>, ExtractorTrace)> {
        match self {
            Extractor::Single(m) => {
                let (out, t) = m.forward(x, solver, warm.map(|(c, k)| (&c.first, k)))?;
                Ok((out, ExtractorTrace::Single(t)))
            }
            Extractor::Composite(c) => {
                let (out, t) = c.forward(x, solver, warm.map(|(c, k)| (&c.first, &c.second, k)))?;
                Ok((out, ExtractorTrace::Composite(t)))
            }
        }
    }

    pub fn forward_value(&self, x: &DVector<f64>, solver: &SolverConfig) -> Result<DVector<f64>> {
        Ok(self.forward(x, solver, None)?.0)
    }

    /// Flat parameter gradient for a feature-space loss gradient.
    pub fn backward(&self, trace: &ExtractorTrace, grad: &DVector<f64>) -> Result<Vec<f64>> {
        let flat = |g: &IcnnGrad| g.to_flat();
        match (self, trace) {
            (Extractor::Single(m), ExtractorTrace::Single(t)) => {
                Ok(flat(&m.backward_params(t, grad)?))
            }
            (Extractor::Composite(c), ExtractorTrace::Composite(t)) => {
                let g = c.backward(t, grad)?;
                let mut p = flat(&g.first);
                p.extend(flat(&g.second));
                Ok(p)
            }
            _ => Err(Error::InvalidConfig(
                "trace does not belong to this extractor".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OuterOptimizer,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Points per side of the exported certainty grid.
    pub grid_size: usize,
    /// Fraction of the data extent added on each side of the grid.
    pub grid_pad: f64,
    /// Uniform background points scored against the test set.
    pub n_background: usize,
}

impl Default for DuqTrainConfig {
    fn default() -> Self {
        DuqTrainConfig {
            epochs: 30,
            batch_size: 64,
            optimizer: OuterOptimizer::sgd(0.01, 0.9, 1e-4),
            solver: SolverConfig::newton(1e-8, 100),
            seed: 0,
            grid_size: 200,
            grid_pad: 0.4,
            n_background: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub certainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DuqReport {
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
    pub accuracy: f64,
    /// Certainty of test points against uniform background points.
    pub auroc: f64,
    pub grid: Vec<GridPoint>,
    pub nonconverged: usize,
}

/// Writes `x, y, certainty`.
pub fn write_grid_csv<W: Write>(grid: &[GridPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in grid {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn features_of(
    extractor: &Extractor,
    xs: &[DVector<f64>],
    solver: &SolverConfig,
) -> Result<Vec<DVector<f64>>> {
    xs.par_iter()
        .map(|x| extractor.forward_value(x, solver))
        .collect()
}

pub fn accuracy(
    extractor: &Extractor,
    head: &DuqHead,
    xs: &[DVector<f64>],
    labels: &[usize],
    solver: &SolverConfig,
) -> Result<f64> {
    let feats = features_of(extractor, xs, solver)?;
    let mut correct = 0usize;
    for (f, l) in feats.iter().zip(labels) {
        correct += usize::from(head.predict(f)? == *l);
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Joint training of extractor and head projections with EMA centroid
/// updates after every step, followed by evaluation on the test split.
pub fn train_duq(
    extractor: &mut Extractor,
    head: &mut DuqHead,
    train: (&[DVector<f64>], &[usize]),
    test: (&[DVector<f64>], &[usize]),
    cfg: &DuqTrainConfig,
) -> Result<DuqReport> {
    let (xs, labels) = train;
    if xs.len() != labels.len() || xs.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig(
            "DUQ training needs matching non-empty data, batches and epochs".into(),
        ));
    }
    if head.config.feature_dim != extractor.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: extractor.output_dim(),
            got: head.config.feature_dim,
            context: "duq head features",
        });
    }
    cfg.solver.validate()?;
    let n_ext = extractor.params().len();
    let mut params = extractor.params();
    params.extend(head.params());
    let mut opt = OptimizerState::new(cfg.optimizer, params.len())?;
    let caches = ExtractorCaches::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut nonconverged = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let fwd = batch
                .par_iter()
                .map(|&i| {
                    extractor.forward(&xs[i], &cfg.solver, Some((&caches, SampleKey::Index(i))))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::TrainingDivergence {
                    epoch,
                    source: Box::new(e),
                })?;
            nonconverged += fwd.iter().filter(|(_, t)| !trace_converged(t)).count();
            let feats: Vec<DVector<f64>> = fwd.iter().map(|(f, _)| f.clone()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let lg = head.loss(&feats, &batch_labels)?;
            let grads = fwd
                .par_iter()
                .zip(&lg.features)
                .map(|((_, t), g)| extractor.backward(t, g))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::TrainingDivergence {
                    epoch,
                    source: Box::new(e),
                })?;
            let mut total = vec![0.0; params.len()];
            for g in &grads {
                for (t, v) in total[..n_ext].iter_mut().zip(g) {
                    *t += v;
                }
            }
            for (t, v) in total[n_ext..]
                .iter_mut()
                .zip(lg.weights.iter().flat_map(|w| w.as_slice().iter()))
            {
                *t += v;
            }
            opt.step(&mut params, &total)?;
            extractor.set_params(&params[..n_ext]);
            extractor.project_nonneg();
            head.set_params(&params[n_ext..]);
            params[..n_ext].copy_from_slice(&extractor.params());

            let updated = batch
                .par_iter()
                .map(|&i| {
                    Ok(extractor
                        .forward(&xs[i], &cfg.solver, Some((&caches, SampleKey::Index(i))))?
                        .0)
                })
                .collect::<Result<Vec<_>>>()?;
            head.update_centroids(&updated, &batch_labels)?;
            epoch_loss += lg.loss;
            batches += 1;
        }
        losses.push(epoch_loss / batches as f64);
    }

    let (test_xs, test_labels) = test;
    let acc = accuracy(extractor, head, test_xs, test_labels, &cfg.solver)?;
    let (lo, hi) = padded_bounds(xs, cfg.grid_pad);

    let mut bg_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bd1_e995);
    let ux =
        Uniform::new_inclusive(lo[0], hi[0]).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let uy =
        Uniform::new_inclusive(lo[1], hi[1]).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let background: Vec<DVector<f64>> = (0..cfg.n_background)
        .map(|_| DVector::from_vec(vec![ux.sample(&mut bg_rng), uy.sample(&mut bg_rng)]))
        .collect();
    let certainty = |pts: &[DVector<f64>]| -> Result<Vec<f64>> {
        features_of(extractor, pts, &cfg.solver)?
            .iter()
            .map(|f| head.certainty(f))
            .collect()
    };
    let mut scores = certainty(test_xs)?;
    let mut is_test = vec![true; scores.len()];
    scores.extend(certainty(&background)?);
    is_test.resize(scores.len(), false);
    let auc = auroc(&scores, &is_test)?;

    let n = cfg.grid_size.max(2);
    let coords: Vec<DVector<f64>> = (0..n)
        .flat_map(|j| {
            (0..n).map(move |i| {
                DVector::from_vec(vec![
                    lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / (n - 1) as f64,
                ])
            })
        })
        .collect();
    let grid = certainty(&coords)?
        .into_iter()
        .zip(&coords)
        .map(|(c, p)| GridPoint {
            x: p[0],
            y: p[1],
            certainty: c,
        })
        .collect();

    Ok(DuqReport {
        losses,
        accuracy: acc,
        auroc: auc,
        grid,
        nonconverged,
    })
}

fn trace_converged(t: &ExtractorTrace) -> bool {
    match t {
        ExtractorTrace::Single(t) => t.lft.converged,
        ExtractorTrace::Composite(t) => t.first.lft.converged && t.second.lft.converged,
    }
}
