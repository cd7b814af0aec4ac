use anyhow::Result;
use blnn::duq::{
    train_duq, two_moons, write_grid_csv, DuqHead, DuqHeadConfig, DuqTrainConfig, Extractor,
    MoonsConfig,
};
use blnn::lft::SolverConfig;
use blnn::model::BlnnConfig;
use blnn::training::OuterOptimizer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::seed_range;
use crate::output::{rows_to_csv, Outcome};
use crate::stats::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoMoonsConfig {
    /// Both stages of the extractor use this `(α, β)`.
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub seeds: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub centroid_dim: usize,
    pub length_scale: f64,
    pub ema: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OuterOptimizer,
    pub solver: SolverConfig,
    pub grid_size: usize,
    pub grid_pad: f64,
    pub n_background: usize,
}

impl Default for TwoMoonsConfig {
    fn default() -> Self {
        let train = DuqTrainConfig::default();
        TwoMoonsConfig {
            alpha: 2.0,
            beta: 4.0,
            seed: 0,
            seeds: 1,
            n_train: 1500,
            n_test: 200,
            noise: 0.1,
            hidden: vec![20, 20],
            feature_dim: 40,
            centroid_dim: 10,
            length_scale: 0.3,
            ema: 0.99,
            epochs: train.epochs,
            batch_size: train.batch_size,
            optimizer: train.optimizer,
            solver: train.solver,
            grid_size: train.grid_size,
            grid_pad: train.grid_pad,
            n_background: train.n_background,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoonsRun {
    pub seed: u64,
    pub accuracy: f64,
    pub auroc: f64,
    pub final_loss: f64,
    pub nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoMoonsResult {
    pub runs: Vec<MoonsRun>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_auroc: f64,
    /// `x, y, certainty` of the first seed's grid.
    pub grid_csv: Vec<u8>,
}

/// DUQ with a two-stage BLNN extractor on two moons, once per seed.
pub fn run_two_moons(cfg: &TwoMoonsConfig) -> Result<TwoMoonsResult> {
    let seeds = seed_range(cfg.seed, cfg.seeds.max(1));
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let moons = |n, s| {
                two_moons(&MoonsConfig {
                    n_samples: n,
                    noise: cfg.noise,
                    seed: s,
                })
            };
            let (xs, ls) = moons(cfg.n_train, seed)?;
            let (txs, tls) = moons(cfg.n_test, seed.wrapping_add(1000))?;
            let mut extractor = Extractor::composite(
                2,
                cfg.feature_dim,
                &cfg.hidden,
                BlnnConfig::new(cfg.alpha, cfg.beta)?,
                seed,
            )?;
            let head_cfg = DuqHeadConfig {
                length_scale: cfg.length_scale,
                ema: cfg.ema,
                ..DuqHeadConfig::new(2, cfg.feature_dim, cfg.centroid_dim)
            };
            let mut head = DuqHead::new(head_cfg, seed)?;
            let train = DuqTrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                optimizer: cfg.optimizer,
                solver: cfg.solver,
                seed,
                grid_size: cfg.grid_size,
                grid_pad: cfg.grid_pad,
                n_background: cfg.n_background,
            };
            let report = train_duq(&mut extractor, &mut head, (&xs, &ls), (&txs, &tls), &train)?;
            Ok((
                MoonsRun {
                    seed,
                    accuracy: report.accuracy,
                    auroc: report.auroc,
                    final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
                    nonconverged: report.nonconverged,
                },
                report.grid,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grid_csv = Vec::new();
    write_grid_csv(&per_seed[0].1, &mut grid_csv)?;
    let runs: Vec<MoonsRun> = per_seed.into_iter().map(|(r, _)| r).collect();
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    let mean_auroc = mean_std(&runs.iter().map(|r| r.auroc).collect::<Vec<_>>()).0;
    Ok(TwoMoonsResult {
        runs,
        mean_accuracy,
        std_accuracy,
        mean_auroc,
        grid_csv,
    })
}

impl TwoMoonsResult {
    pub fn outcome(&self) -> Result<Outcome> {
        let failures = self
            .runs
            .iter()
            .filter(|r| !r.final_loss.is_finite())
            .map(|r| format!("seed {}: non-finite loss", r.seed))
            .collect();
        Ok(Outcome {
            results_csv: rows_to_csv(&self.runs)?,
            metrics: serde_json::json!({
                "mean_accuracy": self.mean_accuracy,
                "std_accuracy": self.std_accuracy,
                "mean_auroc": self.mean_auroc,
            }),
            extra: vec![("grid.csv".to_string(), self.grid_csv.clone())],
            failures,
        })
    }
}
