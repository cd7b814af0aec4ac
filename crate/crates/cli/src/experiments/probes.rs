use std::path::PathBuf;

use anyhow::{ensure, Result};
use blnn::convexnet::{init_icnn, ActivationKind, InitScheme, Parameters};
use blnn::estimator::{
    estimate_bilip, estimate_from_points, BiLipEstimate, Domain, SamplerConfig, DEFAULT_MIN_SEP,
};
use blnn::lft::{
    gd_lipschitz_bounds, max_curvature, solve_lft_observed, ConvexObjective, SolverConfig,
    SolverKind,
};
use blnn::model::{Blnn, BlnnConfig, ModelBundle};
use nalgebra::DVector;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::seed_range;
use crate::output::{rows_to_csv, Outcome};
use crate::stats::ks_statistic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitDistConfig {
    pub alpha: f64,
    pub beta: f64,
    pub trials: usize,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub scheme: InitScheme,
    /// A second scheme whose distribution is compared against `scheme`.
    pub compare: Option<InitScheme>,
    /// Points sampled from `[-half_width, half_width]^dim` per model.
    pub n_points: usize,
    pub half_width: f64,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for InitDistConfig {
    fn default() -> Self {
        InitDistConfig {
            alpha: 4.0,
            beta: 60.0,
            trials: 100,
            dim: 2,
            hidden: vec![10, 10, 10],
            scheme: InitScheme::XavierClamp,
            compare: Some(InitScheme::Uniform { lo: 1.0, hi: 1.1 }),
            n_points: 200,
            half_width: 1.0,
            seed: 0,
            solver: SolverConfig::newton(1e-10, 100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDistRow {
    pub scheme: String,
    pub trial: u64,
    pub lip_hat: f64,
    pub invlip_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDistResult {
    pub rows: Vec<InitDistRow>,
    /// Share of `lip_hat` within 5% of `α + β` under the main scheme.
    pub near_max_fraction: f64,
    /// Share of `(invlip_hat, lip_hat)` inside `[α − 1e-3, α + β + 1e-3]`.
    pub in_bounds_fraction: f64,
    /// KS statistic between the two schemes' `invlip_hat` samples.
    pub ks_invlip: Option<f64>,
}

fn scheme_name(s: &InitScheme) -> String {
    match s {
        InitScheme::XavierClamp => "xavier_clamp".into(),
        InitScheme::Uniform { lo, hi } => format!("uniform({lo},{hi})"),
    }
}

/// Estimated constants of freshly initialized BLNNs.
pub fn run_init_dist(cfg: &InitDistConfig) -> Result<InitDistResult> {
    let bilip = BlnnConfig::new(cfg.alpha, cfg.beta)?;
    let domain = Domain::cube(cfg.dim, -cfg.half_width, cfg.half_width);
    let sample = |scheme: InitScheme| -> Result<Vec<InitDistRow>> {
        seed_range(cfg.seed, cfg.trials)
            .into_par_iter()
            .map(|seed| {
                let core = init_icnn(cfg.dim, &cfg.hidden, ActivationKind::Softplus, scheme, seed)?;
                let m = Blnn::new(core, bilip.clone())?;
                let sampler =
                    SamplerConfig::new(domain.clone(), cfg.n_points, seed.wrapping_add(1000));
                let est = estimate_bilip(|x| m.forward_value(x, &cfg.solver), &sampler)?;
                Ok(InitDistRow {
                    scheme: scheme_name(&scheme),
                    trial: seed,
                    lip_hat: est.lip_hat,
                    invlip_hat: est.invlip_hat,
                })
            })
            .collect()
    };
    let mut rows = sample(cfg.scheme)?;
    let top = cfg.alpha + cfg.beta;
    let n = rows.len().max(1) as f64;
    let near_max_fraction = rows
        .iter()
        .filter(|r| (r.lip_hat - top).abs() <= 0.05 * top)
        .count() as f64
        / n;
    let in_bounds_fraction = rows
        .iter()
        .filter(|r| r.invlip_hat >= cfg.alpha - 1e-3 && r.lip_hat <= top + 1e-3)
        .count() as f64
        / n;
    let ks_invlip = match cfg.compare {
        Some(other) => {
            let alt = sample(other)?;
            let a: Vec<f64> = rows.iter().map(|r| r.invlip_hat).collect();
            let b: Vec<f64> = alt.iter().map(|r| r.invlip_hat).collect();
            rows.extend(alt);
            Some(ks_statistic(&a, &b))
        }
        None => None,
    };
    Ok(InitDistResult {
        rows,
        near_max_fraction,
        in_bounds_fraction,
        ks_invlip,
    })
}

impl InitDistResult {
    pub fn outcome(&self, cfg: &InitDistConfig) -> Result<Outcome> {
        let top = cfg.alpha + cfg.beta;
        let failures = self
            .rows
            .iter()
            .filter(|r| r.invlip_hat < cfg.alpha - 1e-3 || r.lip_hat > top + 1e-3)
            .map(|r| {
                format!(
                    "{} trial {}: ({}, {}) outside the certified window",
                    r.scheme, r.trial, r.invlip_hat, r.lip_hat
                )
            })
            .collect();
        Ok(Outcome {
            results_csv: rows_to_csv(&self.rows)?,
            metrics: serde_json::json!({
                "near_max_fraction": self.near_max_fraction,
                "in_bounds_fraction": self.in_bounds_fraction,
                "ks_invlip": self.ks_invlip,
            }),
            extra: Vec::new(),
            failures,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LftBenchConfig {
    pub kinds: Vec<SolverKind>,
    /// The quadratic term is `‖y‖² / (2β)`, so `μ = 1/β`.
    pub beta: f64,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub iters: usize,
    pub n_points: usize,
    pub half_width: f64,
    pub seed: u64,
}

impl Default for LftBenchConfig {
    fn default() -> Self {
        LftBenchConfig {
            kinds: SolverKind::ALL.to_vec(),
            beta: 10.0,
            dim: 2,
            hidden: vec![10, 10],
            iters: 200,
            n_points: 100,
            half_width: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LftBenchRow {
    pub solver: String,
    pub iter: usize,
    pub lip_hat: f64,
    pub invlip_hat: f64,
    /// `h(t)` for gradient descent, empty for the other kinds.
    pub gd_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LftBenchResult {
    pub rows: Vec<LftBenchRow>,
    /// Smoothness estimate `γ̂` of the objective.
    pub gamma_hat: f64,
    pub mu: f64,
}

/// Iterates `y_t(x)` of each solver from the shared start `y_0 = 0`,
/// extended by the last iterate once a run stops early.
pub fn solver_iterates(
    obj: &impl ConvexObjective,
    xs: &[DVector<f64>],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let iters = cfg.max_iters;
    let per_point = xs
        .par_iter()
        .map(|x| {
            let mut path = Vec::with_capacity(iters + 1);
            solve_lft_observed(obj, x, cfg, DVector::zeros(x.len()), |_, y, _| {
                path.push(y.clone())
            })?;
            let last = path.last().cloned().expect("start is observed");
            path.resize(iters + 1, last);
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..=iters)
        .map(|t| per_point.iter().map(|p| p[t].clone()).collect())
        .collect())
}

/// Estimated constants of `x ↦ y_t(x)` against `t` for several solvers.
pub fn run_lft_bench(cfg: &LftBenchConfig) -> Result<LftBenchResult> {
    let core = init_icnn(
        cfg.dim,
        &cfg.hidden,
        ActivationKind::Softplus,
        InitScheme::XavierClamp,
        cfg.seed,
    )?;
    let model = Blnn::new(core, BlnnConfig::new(0.0, cfg.beta)?)?;
    let obj = model.objective();
    let mu = 1.0 / cfg.beta;
    let xs = Domain::cube(cfg.dim, -cfg.half_width, cfg.half_width)
        .sample(cfg.n_points, cfg.seed.wrapping_add(1))?;

    // curvature over every iterate the gd and newton paths visit
    let mut gd = SolverConfig::for_kind(SolverKind::Gd, mu, None)?;
    gd.max_iters = cfg.iters;
    gd.tol = 1e-12;
    let gd_path = solver_iterates(&obj, &xs, &gd)?;
    let exact = solver_iterates(&obj, &xs, &SolverConfig::newton(1e-12, 100))?;
    let probes: Vec<DVector<f64>> = gd_path
        .iter()
        .chain(&exact)
        .flatten()
        .chain(&xs)
        .cloned()
        .collect();
    let gamma_hat = max_curvature(&obj, &probes)?;
    let h = gd_lipschitz_bounds(cfg.iters, mu, gamma_hat.max(mu));

    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        let path = if kind == SolverKind::Gd {
            gd_path.clone()
        } else {
            let mut solver = SolverConfig::for_kind(kind, mu, Some(gamma_hat))?;
            solver.max_iters = cfg.iters;
            solver.tol = 1e-12;
            solver_iterates(&obj, &xs, &solver)?
        };
        for (t, ys) in path.iter().enumerate().skip(1) {
            let est = estimate_from_points(&xs, ys, DEFAULT_MIN_SEP, cfg.seed)?;
            rows.push(LftBenchRow {
                solver: kind.name().to_string(),
                iter: t,
                lip_hat: est.lip_hat,
                invlip_hat: est.invlip_hat,
                gd_bound: (kind == SolverKind::Gd).then(|| h[t]),
            });
        }
    }
    Ok(LftBenchResult {
        rows,
        gamma_hat,
        mu,
    })
}

impl LftBenchResult {
    pub fn outcome(&self) -> Result<Outcome> {
        let mut failures = Vec::new();
        for r in &self.rows {
            if let Some(b) = r.gd_bound {
                if r.lip_hat > b * (1.0 + 1e-8) {
                    failures.push(format!(
                        "gd iteration {}: lip_hat {} exceeds h(t) = {}",
                        r.iter, r.lip_hat, b
                    ));
                }
            }
        }
        if let Some(last) = self.rows.iter().rfind(|r| r.solver == "newton") {
            let (lo, hi) = (1.0 / self.gamma_hat, 1.0 / self.mu);
            if last.invlip_hat < lo * 0.98 || last.lip_hat > hi * 1.02 {
                failures.push(format!(
                    "newton constants ({}, {}) leave the window [{lo}, {hi}]",
                    last.invlip_hat, last.lip_hat
                ));
            }
        }
        Ok(Outcome {
            results_csv: rows_to_csv(&self.rows)?,
            metrics: serde_json::json!({ "gamma_hat": self.gamma_hat, "mu": self.mu }),
            extra: Vec::new(),
            failures,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub nets: usize,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Central-difference step.
    pub eps: f64,
    pub threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            nets: 10,
            dim: 2,
            hidden: vec![6, 6],
            alpha: 0.5,
            beta: 2.0,
            seed: 0,
            eps: 1e-5,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub net: u64,
    /// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over all core parameters.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub rows: Vec<GradcheckRow>,
    pub max_rel_error: f64,
}

/// Implicit parameter gradients of `⟨w, f(x)⟩` against central differences.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckResult> {
    let solver = SolverConfig::newton(1e-12, 100);
    let rows = seed_range(cfg.seed, cfg.nets)
        .into_par_iter()
        .map(|seed| {
            let core = init_icnn(
                cfg.dim,
                &cfg.hidden,
                ActivationKind::Softplus,
                InitScheme::XavierClamp,
                seed,
            )?;
            let model = Blnn::new(core, BlnnConfig::new(cfg.alpha, cfg.beta)?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
            let u = Uniform::new(-1.0, 1.0)?;
            let x = DVector::from_fn(cfg.dim, |_, _| u.sample(&mut rng));
            let w = DVector::from_fn(cfg.dim, |_, _| u.sample(&mut rng));
            let (_, trace) = model.forward(&x, &solver, None)?;
            let g = model.backward_params(&trace, &w)?.to_flat();
            let base = model.core.to_flat();
            let mut fd = vec![0.0; base.len()];
            let mut probe = model.clone();
            for (i, slot) in fd.iter_mut().enumerate() {
                let mut at = |delta: f64| -> Result<f64> {
                    let mut p = base.clone();
                    p[i] += delta;
                    probe.core.set_flat(&p);
                    Ok(probe.forward_value(&x, &solver)?.dot(&w))
                };
                *slot = (at(cfg.eps)? - at(-cfg.eps)?) / (2.0 * cfg.eps);
            }
            let diff: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let scale = norm(&g).max(norm(&fd)).max(1e-12);
            Ok(GradcheckRow {
                net: seed,
                rel_error: diff / scale,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(GradcheckResult {
        rows,
        max_rel_error,
    })
}

impl GradcheckResult {
    pub fn outcome(&self, cfg: &GradcheckConfig) -> Result<Outcome> {
        let failures = if self.max_rel_error < cfg.threshold {
            Vec::new()
        } else {
            vec![format!(
                "max relative error {} is not below {}",
                self.max_rel_error, cfg.threshold
            )]
        };
        Ok(Outcome {
            results_csv: rows_to_csv(&self.rows)?,
            metrics: serde_json::json!({ "max_rel_error": self.max_rel_error }),
            extra: Vec::new(),
            failures,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    /// A saved model bundle.
    pub model: PathBuf,
    pub lo: f64,
    pub hi: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            model: PathBuf::from("model.json"),
            lo: -1.0,
            hi: 1.0,
            n_samples: 1000,
            seed: 0,
        }
    }
}

/// Empirical constants of a saved model over a cube.
pub fn run_estimate(cfg: &EstimateConfig) -> Result<BiLipEstimate> {
    ensure!(cfg.lo < cfg.hi, "empty domain [{}, {}]", cfg.lo, cfg.hi);
    let bundle = ModelBundle::load(&cfg.model)?;
    let model = bundle.model()?;
    let solver = bundle.solver_defaults;
    let sampler = SamplerConfig::new(
        Domain::cube(model.dim(), cfg.lo, cfg.hi),
        cfg.n_samples,
        cfg.seed,
    );
    Ok(estimate_bilip(
        |x| model.forward_value(x, &solver),
        &sampler,
    )?)
}

pub fn estimate_outcome(est: &BiLipEstimate) -> Result<Outcome> {
    #[derive(Serialize)]
    struct Row {
        lip_hat: f64,
        invlip_hat: f64,
        n_pairs: usize,
        seed: u64,
    }
    Ok(Outcome {
        results_csv: rows_to_csv(&[Row {
            lip_hat: est.lip_hat,
            invlip_hat: est.invlip_hat,
            n_pairs: est.n_pairs,
            seed: est.seed,
        }])?,
        metrics: serde_json::to_value(est)?,
        extra: Vec::new(),
        failures: Vec::new(),
    })
}
