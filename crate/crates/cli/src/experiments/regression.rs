use std::time::Instant;

use anyhow::Result;
use blnn::convexnet::{init_icnn, ActivationKind, InitScheme};
use blnn::lft::SolverConfig;
use blnn::model::{Blnn, BlnnConfig};
use blnn::training::{
    anneal_step, evaluate_mse, make_exp_dataset, make_linear_dataset, make_step_dataset, test_grid,
    train_regression, train_regression_with, AnnealState, BlnnRegressor, Dataset1D, EpochRecord,
    EvalConfig, LossKind, OuterOptimizer, SnMlp, Target, TrainConfig, TrainReport, Trainable,
    TRAIN_POINTS, TRAIN_RANGE,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::seed_range;
use crate::output::{rows_to_csv, Outcome};
use crate::stats::mean_std;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Blnn,
    Sn,
}

/// Architecture and optimizer shared by the 1-D regression experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionSetup {
    /// Hidden widths of the ICNN core.
    pub hidden: Vec<usize>,
    /// Hidden widths of the spectrally normalized MLP.
    pub sn_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_train: usize,
    pub solver: SolverConfig,
}

impl Default for RegressionSetup {
    fn default() -> Self {
        RegressionSetup {
            hidden: vec![64, 64],
            sn_hidden: vec![45, 45, 45],
            epochs: 300,
            batch_size: 1,
            lr: 0.01,
            n_train: TRAIN_POINTS,
            solver: SolverConfig::newton(1e-8, 100),
        }
    }
}

impl RegressionSetup {
    fn train_config(&self, seed: u64, eval: Option<EvalConfig>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OuterOptimizer::adam(self.lr),
            solver: self.solver,
            loss: LossKind::Mse,
            seed,
            eval,
        }
    }

    fn blnn(&self, alpha: f64, bound: f64, seed: u64) -> Result<BlnnRegressor> {
        let core = init_icnn(
            1,
            &self.hidden,
            ActivationKind::Softplus,
            InitScheme::XavierClamp,
            seed,
        )?;
        Ok(BlnnRegressor::new(Blnn::new(
            core,
            BlnnConfig::new(alpha, bound - alpha)?,
        )?))
    }

    fn sn(&self, bound: f64, seed: u64) -> Result<SnMlp> {
        let mut widths = vec![1];
        widths.extend(&self.sn_hidden);
        widths.push(1);
        Ok(SnMlp::new(&widths, bound, seed)?)
    }

    fn data(&self, target: Target, seed: u64) -> Result<Dataset1D> {
        let (lo, hi) = TRAIN_RANGE;
        Ok(match target {
            Target::Step => make_step_dataset(self.n_train, lo, hi, seed)?,
            Target::Linear { slope } => make_linear_dataset(slope, self.n_train, lo, hi, seed)?,
            Target::Exp => make_exp_dataset(self.n_train, lo, hi, seed)?,
        })
    }
}

/// Trains either model and hands back the report with the trained model's
/// test MSE.
fn fit(
    setup: &RegressionSetup,
    model: ModelChoice,
    alpha: f64,
    bound: f64,
    target: Target,
    seed: u64,
    eval: Option<EvalConfig>,
) -> Result<(TrainReport, f64)> {
    let data = setup.data(target, seed)?;
    let cfg = setup.train_config(seed, eval);
    let test = test_grid(target);
    fn go<M: Trainable>(
        mut m: M,
        data: &Dataset1D,
        cfg: &TrainConfig,
        test: &Dataset1D,
    ) -> Result<(TrainReport, f64)> {
        let report = train_regression(&mut m, data, cfg)?;
        let mse = evaluate_mse(&m, test, &cfg.solver)?;
        Ok((report, mse))
    }
    match model {
        ModelChoice::Blnn => go(setup.blnn(alpha, bound, seed)?, &data, &cfg, &test),
        ModelChoice::Sn => go(setup.sn(bound, seed)?, &data, &cfg, &test),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TightnessConfig {
    pub model: ModelChoice,
    /// Imposed Lipschitz bounds `L`.
    pub bounds: Vec<f64>,
    /// BLNNs use `α = alpha` and `β = L − alpha`.
    pub alpha: f64,
    pub seed: u64,
    pub seeds: usize,
    /// Where the trained model's Lipschitz constant is measured.
    pub eval: EvalConfig,
    pub setup: RegressionSetup,
}

impl Default for TightnessConfig {
    fn default() -> Self {
        TightnessConfig {
            model: ModelChoice::Blnn,
            bounds: vec![5.0, 10.0, 50.0],
            alpha: 1.0,
            seed: 0,
            seeds: 5,
            eval: EvalConfig::default(),
            setup: RegressionSetup::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub bound: f64,
    pub seed: u64,
    pub lip_hat: f64,
    pub invlip_hat: f64,
    pub tightness: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessSummary {
    pub bound: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessResult {
    pub runs: Vec<TightnessRow>,
    pub summary: Vec<TightnessSummary>,
}

/// Fits the step function under each bound and reports `100 · lip_hat / L`.
pub fn run_tightness(cfg: &TightnessConfig) -> Result<TightnessResult> {
    let jobs: Vec<(f64, u64)> = cfg
        .bounds
        .iter()
        .flat_map(|&l| {
            seed_range(cfg.seed, cfg.seeds)
                .into_iter()
                .map(move |s| (l, s))
        })
        .collect();
    let eval = EvalConfig {
        every: 0,
        ..cfg.eval.clone()
    };
    let runs = jobs
        .par_iter()
        .map(|&(bound, seed)| {
            let start = Instant::now();
            let (report, _) = fit(
                &cfg.setup,
                cfg.model,
                cfg.alpha,
                bound,
                Target::Step,
                seed,
                Some(eval.clone()),
            )?;
            let last = report.last();
            let lip_hat = last.lip_hat.unwrap_or(f64::NAN);
            Ok(TightnessRow {
                bound,
                seed,
                lip_hat,
                invlip_hat: last.invlip_hat.unwrap_or(f64::NAN),
                tightness: 100.0 * lip_hat / bound,
                final_loss: last.loss,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = cfg
        .bounds
        .iter()
        .map(|&bound| {
            let t: Vec<f64> = runs
                .iter()
                .filter(|r| r.bound == bound)
                .map(|r| r.tightness)
                .collect();
            let (mean, std) = mean_std(&t);
            TightnessSummary { bound, mean, std }
        })
        .collect();
    Ok(TightnessResult { runs, summary })
}

impl TightnessResult {
    pub fn outcome(&self, cfg: &TightnessConfig) -> Result<Outcome> {
        let mut failures = Vec::new();
        for r in &self.runs {
            // the certified bound must hold for every trained model
            let floor = if cfg.model == ModelChoice::Blnn {
                cfg.alpha
            } else {
                0.0
            };
            if !(r.lip_hat <= r.bound * (1.0 + 1e-4)) || !(r.invlip_hat >= floor * (1.0 - 1e-4)) {
                failures.push(format!(
                    "L = {}, seed {}: estimate ({}, {}) leaves the certified window",
                    r.bound, r.seed, r.invlip_hat, r.lip_hat
                ));
            }
        }
        Ok(Outcome {
            results_csv: rows_to_csv(&self.runs)?,
            metrics: serde_json::json!({ "summary": self.summary }),
            extra: Vec::new(),
            failures,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlexibilityConfig {
    pub model: ModelChoice,
    pub bound: f64,
    pub alpha: f64,
    pub slope: f64,
    pub seed: u64,
    pub setup: RegressionSetup,
}

impl Default for FlexibilityConfig {
    fn default() -> Self {
        FlexibilityConfig {
            model: ModelChoice::Blnn,
            bound: 1000.0,
            alpha: 0.0,
            slope: 1.0,
            seed: 0,
            setup: RegressionSetup {
                epochs: 100,
                batch_size: 8,
                ..RegressionSetup::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibilityResult {
    pub epochs: Vec<EpochRecord>,
    pub final_loss: f64,
    pub test_mse: f64,
    pub first_epoch_below_half: Option<usize>,
}

/// Fits `y = slope · x` under a generous bound.
pub fn run_flexibility(cfg: &FlexibilityConfig) -> Result<FlexibilityResult> {
    let (report, test_mse) = fit(
        &cfg.setup,
        cfg.model,
        cfg.alpha,
        cfg.bound,
        Target::Linear { slope: cfg.slope },
        cfg.seed,
        None,
    )?;
    Ok(FlexibilityResult {
        final_loss: report.last().loss,
        first_epoch_below_half: report.first_epoch_below(0.5),
        epochs: report.epochs,
        test_mse,
    })
}

impl FlexibilityResult {
    pub fn outcome(&self) -> Result<Outcome> {
        let mut buf = Vec::new();
        blnn::training::write_metrics_csv(&self.epochs, &mut buf)?;
        let mut failures = Vec::new();
        if !self.final_loss.is_finite() || !self.test_mse.is_finite() {
            failures.push("non-finite loss".to_string());
        }
        Ok(Outcome {
            results_csv: buf,
            metrics: serde_json::json!({
                "final_loss": self.final_loss,
                "test_mse": self.test_mse,
                "first_epoch_below_half": self.first_epoch_below_half,
            }),
            extra: Vec::new(),
            failures,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub model: ModelChoice,
    pub bounds: Vec<f64>,
    pub alpha: f64,
    pub slope: f64,
    pub seed: u64,
    pub setup: RegressionSetup,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            model: ModelChoice::Blnn,
            bounds: vec![25.0, 35.0, 45.0, 55.0, 75.0, 100.0, 125.0],
            alpha: 0.0,
            slope: 50.0,
            seed: 0,
            setup: RegressionSetup {
                epochs: 1000,
                batch_size: TRAIN_POINTS,
                ..RegressionSetup::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bound: f64,
    /// Training loss of the last epoch.
    pub final_loss: f64,
    pub first_epoch_below_half: Option<usize>,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn loss_at(&self, bound: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.bound == bound)
            .map(|r| r.final_loss)
    }

    pub fn outcome(&self) -> Result<Outcome> {
        let failures = self
            .rows
            .iter()
            .filter(|r| !r.final_loss.is_finite())
            .map(|r| format!("L = {}: non-finite loss", r.bound))
            .collect();
        Ok(Outcome {
            results_csv: rows_to_csv(&self.rows)?,
            metrics: serde_json::json!({ "rows": self.rows }),
            extra: Vec::new(),
            failures,
        })
    }
}

/// Final loss and first epoch below 0.5 for each bound when fitting
/// `y = slope · x`.
pub fn run_summary_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let rows = cfg
        .bounds
        .par_iter()
        .map(|&bound| {
            let (report, test_mse) = fit(
                &cfg.setup,
                cfg.model,
                cfg.alpha,
                bound,
                Target::Linear { slope: cfg.slope },
                cfg.seed,
                None,
            )?;
            Ok(SweepRow {
                bound,
                final_loss: report.last().loss,
                first_epoch_below_half: report.first_epoch_below(0.5),
                test_mse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    pub initial_bound: f64,
    pub check_period: usize,
    pub closeness: f64,
    pub growth: f64,
    pub seed: u64,
    pub eval: EvalConfig,
    pub setup: RegressionSetup,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            initial_bound: 2.0,
            check_period: 5,
            closeness: 0.05,
            growth: 1.5,
            seed: 0,
            eval: EvalConfig::default(),
            setup: RegressionSetup {
                epochs: 200,
                batch_size: 8,
                ..RegressionSetup::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealRow {
    pub epoch: usize,
    pub bound: f64,
    pub lip_hat: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealResult {
    pub rows: Vec<AnnealRow>,
    pub test_mse: f64,
}

/// Fits `exp` with `α = 0`, relaxing `β` whenever the measured constant
/// comes within `closeness` of it at a check epoch.
pub fn run_anneal(cfg: &AnnealConfig) -> Result<AnnealResult> {
    let mut state = AnnealState {
        bound: cfg.initial_bound,
        check_period: cfg.check_period,
        closeness: cfg.closeness,
        growth: cfg.growth,
    };
    state.validate()?;
    let data = cfg.setup.data(Target::Exp, cfg.seed)?;
    let mut model = cfg.setup.blnn(0.0, cfg.initial_bound, cfg.seed)?;
    let train = cfg.setup.train_config(
        cfg.seed,
        Some(EvalConfig {
            every: 1,
            ..cfg.eval.clone()
        }),
    );
    let mut rows = Vec::with_capacity(cfg.setup.epochs);
    train_regression_with(&mut model, &data, &train, |m, rec| {
        let lip = rec.lip_hat.unwrap_or(f64::NAN);
        rows.push(AnnealRow {
            epoch: rec.epoch,
            bound: state.bound,
            lip_hat: lip,
            loss: rec.loss,
        });
        if state.is_check(rec.epoch) {
            let next = anneal_step(state, lip);
            if next.bound != state.bound {
                m.set_lipschitz_bound(next.bound)?;
            }
            state = next;
        }
        Ok(())
    })?;
    let test_mse = evaluate_mse(&model, &test_grid(Target::Exp), &train.solver)?;
    Ok(AnnealResult { rows, test_mse })
}

impl AnnealResult {
    pub fn outcome(&self) -> Result<Outcome> {
        let failures = self
            .rows
            .iter()
            .filter(|r| r.lip_hat > r.bound * (1.0 + 1e-4))
            .map(|r| {
                format!(
                    "epoch {}: lip_hat {} exceeds bound {}",
                    r.epoch, r.lip_hat, r.bound
                )
            })
            .collect();
        let last = self.rows.last();
        Ok(Outcome {
            results_csv: rows_to_csv(&self.rows)?,
            metrics: serde_json::json!({
                "final_bound": last.map(|r| r.bound),
                "final_loss": last.map(|r| r.loss),
                "test_mse": self.test_mse,
            }),
            extra: Vec::new(),
            failures,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RegressionSetup {
        RegressionSetup {
            hidden: vec![4],
            sn_hidden: vec![4],
            epochs: 2,
            batch_size: 16,
            n_train: 32,
            ..RegressionSetup::default()
        }
    }

    #[test]
    fn tightness_rows_cover_every_bound_and_seed() {
        let cfg = TightnessConfig {
            bounds: vec![2.0, 3.0],
            seeds: 2,
            eval: EvalConfig {
                n_samples: 50,
                ..EvalConfig::default()
            },
            setup: tiny(),
            ..TightnessConfig::default()
        };
        let res = run_tightness(&cfg).unwrap();
        assert_eq!(res.runs.len(), 4);
        assert_eq!(res.summary.len(), 2);
        for r in &res.runs {
            assert!(r.tightness > 0.0 && r.tightness <= 100.0 + 1e-2);
        }
        assert!(res.outcome(&cfg).unwrap().passed());
    }

    #[test]
    fn sn_sweep_and_flexibility_run() {
        let sweep = SweepConfig {
            model: ModelChoice::Sn,
            bounds: vec![1.0, 4.0],
            setup: tiny(),
            ..SweepConfig::default()
        };
        let res = run_summary_sweep(&sweep).unwrap();
        assert_eq!(res.rows.len(), 2);
        assert!(res.loss_at(4.0).is_some());
        let flex = run_flexibility(&FlexibilityConfig {
            setup: tiny(),
            ..FlexibilityConfig::default()
        })
        .unwrap();
        assert_eq!(flex.epochs.len(), 2);
        assert!(flex.test_mse.is_finite());
    }

    #[test]
    fn anneal_records_every_epoch() {
        let cfg = AnnealConfig {
            check_period: 1,
            closeness: 10.0,
            eval: EvalConfig {
                n_samples: 30,
                ..EvalConfig::default()
            },
            setup: RegressionSetup {
                epochs: 3,
                ..tiny()
            },
            ..AnnealConfig::default()
        };
        let res = run_anneal(&cfg).unwrap();
        assert_eq!(res.rows.len(), 3);
        // closeness is huge so every check relaxes the bound
        assert_eq!(res.rows[0].bound, 2.0);
        assert_eq!(res.rows[1].bound, 3.0);
        assert_eq!(res.rows[2].bound, 4.5);
        assert!(res.outcome().unwrap().passed());
    }
}
