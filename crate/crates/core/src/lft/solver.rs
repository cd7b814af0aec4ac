use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::objective::ConvexObjective;
use crate::error::{check_dim, Error, Result};

/// Iterates whose norm exceeds this are treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Gd,
    Agd,
    Newton,
    Adagrad,
    Rmsprop,
    Adam,
}

impl SolverKind {
    pub const ALL: [SolverKind; 6] = [
        SolverKind::Gd,
        SolverKind::Agd,
        SolverKind::Newton,
        SolverKind::Adagrad,
        SolverKind::Rmsprop,
        SolverKind::Adam,
    ];

    /// Kinds whose convergence the library relies on. RMSprop and Adam only
    /// serve for comparing iterate drift.
    pub const CERTIFIED: [SolverKind; 4] = [
        SolverKind::Gd,
        SolverKind::Agd,
        SolverKind::Newton,
        SolverKind::Adagrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Gd => "gd",
            SolverKind::Agd => "agd",
            SolverKind::Newton => "newton",
            SolverKind::Adagrad => "adagrad",
            SolverKind::Rmsprop => "rmsprop",
            SolverKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown solver kind `{s}`")))
    }
}

/// Step size schedule `η_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum StepPolicy {
    /// `η_t = 1 / (μ (t + 1))`.
    Decreasing {
        mu: f64,
    },
    /// `η_t = 1 / γ`.
    InverseSmoothness {
        gamma: f64,
    },
    Fixed {
        eta: f64,
    },
}

impl StepPolicy {
    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            StepPolicy::Decreasing { mu } => 1.0 / (mu * (t as f64 + 1.0)),
            StepPolicy::InverseSmoothness { gamma } => 1.0 / gamma,
            StepPolicy::Fixed { eta } => eta,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            StepPolicy::Decreasing { mu } => mu,
            StepPolicy::InverseSmoothness { gamma } => gamma,
            StepPolicy::Fixed { eta } => eta,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "step policy parameter must be positive, got {v}"
            )))
        }
    }
}

/// Internal constants of the adaptive solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    pub adagrad_eps: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Constant Nesterov momentum. `None` falls back to `t / (t + 3)`.
    pub agd_momentum: Option<f64>,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        AdaptiveParams {
            adagrad_eps: 1e-10,
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            agd_momentum: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub step: StepPolicy,
    pub max_iters: usize,
    pub tol: f64,
    #[serde(default)]
    pub hyper: AdaptiveParams,
}

impl SolverConfig {
    /// The usual step size for each kind: `1/(μ(t+1))` for gd, rmsprop and
    /// adam, `1/μ` for adagrad, `1/γ` for agd and 1 for newton.
    ///
    /// `gamma` is only consulted for agd.
    pub fn for_kind(kind: SolverKind, mu: f64, gamma: Option<f64>) -> Result<Self> {
        let mut hyper = AdaptiveParams::default();
        let step = match kind {
            SolverKind::Gd | SolverKind::Rmsprop | SolverKind::Adam => {
                StepPolicy::Decreasing { mu }
            }
            SolverKind::Adagrad => StepPolicy::Fixed { eta: 1.0 / mu },
            SolverKind::Newton => StepPolicy::Fixed { eta: 1.0 },
            SolverKind::Agd => {
                let gamma = gamma.ok_or_else(|| {
                    Error::InvalidConfig("agd needs a smoothness estimate".into())
                })?;
                let kappa = (gamma / mu).max(1.0);
                hyper.agd_momentum = Some((kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0));
                StepPolicy::InverseSmoothness { gamma }
            }
        };
        let cfg = SolverConfig {
            kind,
            step,
            max_iters: 1000,
            tol: 1e-3,
            hyper,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn newton(tol: f64, max_iters: usize) -> Self {
        SolverConfig {
            kind: SolverKind::Newton,
            step: StepPolicy::Fixed { eta: 1.0 },
            max_iters,
            tol,
            hyper: AdaptiveParams::default(),
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        self.step.validate()
    }
}

/// Output of one conjugate-argmax solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LftResult {
    pub y_star: DVector<f64>,
    pub iters: usize,
    /// `‖x − ∇F(y_star)‖`.
    pub residual: f64,
    pub converged: bool,
}

/// Mutable state of an iterative solver.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub y: DVector<f64>,
    /// Point where the next gradient is taken (differs from `y` for agd).
    pub lookahead: DVector<f64>,
    pub t: usize,
    first: DVector<f64>,
    second: DVector<f64>,
}

impl SolverState {
    pub fn new(y0: DVector<f64>) -> Self {
        let d = y0.len();
        SolverState {
            lookahead: y0.clone(),
            y: y0,
            t: 0,
            first: DVector::zeros(d),
            second: DVector::zeros(d),
        }
    }

    /// Applies one update given the ascent direction `x − ∇F` evaluated at
    /// [`SolverState::lookahead`]. Newton additionally needs `∇²F` there.
    pub fn step(
        &mut self,
        cfg: &SolverConfig,
        ascent: &DVector<f64>,
        hessian: Option<&DMatrix<f64>>,
    ) -> Result<()> {
        let eta = cfg.step.eta(self.t);
        self.step_scaled(cfg, eta, ascent, hessian)
    }

    fn step_scaled(
        &mut self,
        cfg: &SolverConfig,
        eta: f64,
        g: &DVector<f64>,
        hessian: Option<&DMatrix<f64>>,
    ) -> Result<()> {
        check_dim(self.y.len(), g.len(), "solver gradient")?;
        let h = &cfg.hyper;
        match cfg.kind {
            SolverKind::Gd => self.y.axpy(eta, g, 1.0),
            SolverKind::Agd => {
                let momentum = h
                    .agd_momentum
                    .unwrap_or(self.t as f64 / (self.t as f64 + 3.0));
                let next = &self.lookahead + g * eta;
                self.lookahead = &next + (&next - &self.y) * momentum;
                self.y = next;
            }
            SolverKind::Newton => {
                let hess = hessian.ok_or(Error::MissingHessian)?;
                let dir = newton_direction(hess, g)?;
                self.y.axpy(eta, &dir, 1.0);
            }
            SolverKind::Adagrad => {
                self.second += g.component_mul(g);
                for k in 0..g.len() {
                    self.y[k] += eta * g[k] / (self.second[k].sqrt() + h.adagrad_eps);
                }
            }
            SolverKind::Rmsprop => {
                let rho = h.rmsprop_decay;
                for k in 0..g.len() {
                    self.second[k] = rho * self.second[k] + (1.0 - rho) * g[k] * g[k];
                    self.y[k] += eta * g[k] / (self.second[k].sqrt() + h.rmsprop_eps);
                }
            }
            SolverKind::Adam => {
                let (b1, b2) = (h.adam_beta1, h.adam_beta2);
                let n = self.t as i32 + 1;
                let c1 = 1.0 - b1.powi(n);
                let c2 = 1.0 - b2.powi(n);
                for k in 0..g.len() {
                    self.first[k] = b1 * self.first[k] + (1.0 - b1) * g[k];
                    self.second[k] = b2 * self.second[k] + (1.0 - b2) * g[k] * g[k];
                    let m = self.first[k] / c1;
                    let v = self.second[k] / c2;
                    self.y[k] += eta * m / (v.sqrt() + h.adam_eps);
                }
            }
        }
        if cfg.kind != SolverKind::Agd {
            self.lookahead.copy_from(&self.y);
        }
        self.t += 1;
        Ok(())
    }
}

/// Solves `H d = g` with a Cholesky factorization.
pub(crate) fn newton_direction(hess: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    match hess.clone().cholesky() {
        Some(c) => Ok(c.solve(g)),
        None => Err(Error::SingularHessian {
            condition: condition_estimate(hess),
        }),
    }
}

pub(crate) fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// One row of a solver trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub residual: f64,
    pub objective_value: f64,
}

/// Maximizes `⟨y, x⟩ − F(y)` from `y0`.
pub fn solve_lft<O: ConvexObjective + ?Sized>(
    obj: &O,
    x: &DVector<f64>,
    cfg: &SolverConfig,
    y0: DVector<f64>,
) -> Result<LftResult> {
    solve_lft_observed(obj, x, cfg, y0, |_, _, _| {})
}

/// Like [`solve_lft`] and also records `(iter, residual, objective)` rows.
pub fn solve_lft_traced<O: ConvexObjective + ?Sized>(
    obj: &O,
    x: &DVector<f64>,
    cfg: &SolverConfig,
    y0: DVector<f64>,
) -> Result<(LftResult, Vec<TraceRow>)> {
    let mut rows = Vec::new();
    let mut err = None;
    let res = solve_lft_observed(obj, x, cfg, y0, |iter, y, residual| match obj.value(y) {
        Ok(f) => rows.push(TraceRow {
            iter,
            residual,
            objective_value: y.dot(x) - f,
        }),
        Err(e) => err = Some(e),
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok((res, rows))
}

/// Runs the solver, calling `observe(t, y_t, residual_t)` for every iterate
/// including the starting point.
///
/// Stops when the residual `‖x − ∇F(y_t)‖` drops to `tol` or after
/// `max_iters` updates. Newton steps are halved until the residual does not
/// increase, which keeps the residual sequence monotone.
pub fn solve_lft_observed<O, F>(
    obj: &O,
    x: &DVector<f64>,
    cfg: &SolverConfig,
    y0: DVector<f64>,
    mut observe: F,
) -> Result<LftResult>
where
    O: ConvexObjective + ?Sized,
    F: FnMut(usize, &DVector<f64>, f64),
{
    cfg.validate()?;
    check_dim(obj.dim(), x.len(), "lft input")?;
    check_dim(obj.dim(), y0.len(), "lft starting point")?;
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iter: 0 });
    }
    let mut state = SolverState::new(y0);
    let mut ascent = x - obj.grad(&state.y)?;
    let mut residual = ascent.norm();
    loop {
        let t = state.t;
        observe(t, &state.y, residual);
        if residual <= cfg.tol || t >= cfg.max_iters {
            break;
        }
        if cfg.kind == SolverKind::Newton {
            let hess = obj.hessian(&state.y)?;
            let dir = newton_direction(&hess, &ascent)?;
            let mut eta = cfg.step.eta(t);
            let mut accepted = None;
            for _ in 0..60 {
                let trial = &state.y + &dir * eta;
                check_finite(&trial, t + 1)?;
                let trial_ascent = x - obj.grad(&trial)?;
                let trial_res = trial_ascent.norm();
                if trial_res <= residual {
                    accepted = Some((trial, trial_ascent, trial_res));
                    break;
                }
                eta *= 0.5;
            }
            match accepted {
                Some((y, a, r)) => {
                    state.y = y;
                    state.lookahead.copy_from(&state.y);
                    state.t += 1;
                    ascent = a;
                    residual = r;
                }
                // no decrease is representable at this precision
                None => break,
            }
            continue;
        }
        let g = if cfg.kind == SolverKind::Agd {
            x - obj.grad(&state.lookahead)?
        } else {
            ascent.clone()
        };
        state.step(cfg, &g, None)?;
        check_finite(&state.y, state.t)?;
        check_finite(&state.lookahead, state.t)?;
        ascent = x - obj.grad(&state.y)?;
        residual = ascent.norm();
    }
    if !residual.is_finite() {
        return Err(Error::Divergence { iter: state.t });
    }
    Ok(LftResult {
        converged: residual <= cfg.tol,
        iters: state.t,
        residual,
        y_star: state.y,
    })
}

fn check_finite(y: &DVector<f64>, iter: usize) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) || y.norm() > DIVERGENCE_NORM {
        return Err(Error::Divergence { iter });
    }
    Ok(())
}

/// Writes a trace as CSV with header `iter,residual,objective_value`.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lft::objective::QuadraticObjective;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose()
    }

    #[test]
    fn pure_quadratic_term() {
        let q = QuadraticObjective::new(DMatrix::zeros(1, 1), 2.0).unwrap();
        let x = DVector::from_element(1, 3.0);
        let newton =
            solve_lft(&q, &x, &SolverConfig::newton(1e-12, 10), DVector::zeros(1)).unwrap();
        assert_eq!(newton.iters, 1);
        assert_relative_eq!(newton.y_star[0], 6.0, epsilon = 1e-12);
        assert!(newton.residual < 1e-14);
        let gd = solve_lft(
            &q,
            &x,
            &SolverConfig::for_kind(SolverKind::Gd, 0.5, None).unwrap(),
            DVector::zeros(1),
        )
        .unwrap();
        assert!(gd.converged);
        assert_relative_eq!(gd.y_star[0], 6.0, epsilon = 1e-6);
    }

    #[test]
    fn random_quadratic_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = QuadraticObjective::new(random_psd(&mut rng, 3), 1.5).unwrap();
        let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let exact = q.exact_argmax(&x).unwrap();
        let res = solve_lft(&q, &x, &SolverConfig::newton(1e-10, 20), DVector::zeros(3)).unwrap();
        assert!((res.y_star - &exact).norm() < 1e-9);
        let cfg = SolverConfig::for_kind(SolverKind::Gd, q.strong_convexity(), None)
            .unwrap()
            .with_max_iters(100_000)
            .with_tol(1e-8);
        let res = solve_lft(&q, &x, &cfg, DVector::zeros(3)).unwrap();
        assert!(res.converged);
        assert!((res.y_star - exact).norm() < 1e-6);
    }

    #[test]
    fn warm_start_at_optimum_needs_no_steps() {
        let q = QuadraticObjective::new(DMatrix::identity(2, 2), 1.0).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let exact = q.exact_argmax(&x).unwrap();
        for kind in SolverKind::CERTIFIED {
            let cfg = SolverConfig::for_kind(kind, q.strong_convexity(), q.smoothness()).unwrap();
            let res = solve_lft(&q, &x, &cfg, exact.clone()).unwrap();
            assert_eq!(res.iters, 0, "{kind:?}");
            assert!(res.converged);
        }
    }

    #[test]
    fn gd_step_moves_along_gradient() {
        let cfg = SolverConfig {
            kind: SolverKind::Gd,
            step: StepPolicy::Fixed { eta: 0.1 },
            max_iters: 1,
            tol: 1e-3,
            hyper: AdaptiveParams::default(),
        };
        let mut s = SolverState::new(DVector::zeros(2));
        s.step(&cfg, &DVector::from_vec(vec![1.0, -2.0]), None)
            .unwrap();
        assert_relative_eq!(s.y, DVector::from_vec(vec![0.1, -0.2]), epsilon = 1e-15);
    }

    #[test]
    fn newton_step_is_exact_on_quadratics_and_needs_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = QuadraticObjective::new(random_psd(&mut rng, 3), 0.7).unwrap();
        let x = DVector::from_vec(vec![0.3, 0.1, -0.4]);
        let y0 = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let cfg = SolverConfig::newton(1e-10, 1);
        let mut s = SolverState::new(y0.clone());
        let g = &x - q.grad(&y0).unwrap();
        assert!(matches!(s.step(&cfg, &g, None), Err(Error::MissingHessian)));
        s.step(&cfg, &g, Some(&q.hessian(&y0).unwrap())).unwrap();
        assert!((s.y - q.exact_argmax(&x).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn agd_agrees_with_gd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = QuadraticObjective::new(random_psd(&mut rng, 4), 2.0).unwrap();
        let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let tol = 1e-6;
        let agd = SolverConfig::for_kind(SolverKind::Agd, q.strong_convexity(), q.smoothness())
            .unwrap()
            .with_tol(tol)
            .with_max_iters(10_000);
        let gd = SolverConfig::for_kind(SolverKind::Gd, q.strong_convexity(), None)
            .unwrap()
            .with_tol(tol)
            .with_max_iters(100_000);
        let a = solve_lft(&q, &x, &agd, DVector::zeros(4)).unwrap();
        let b = solve_lft(&q, &x, &gd, DVector::zeros(4)).unwrap();
        assert!(a.converged && b.converged);
        // both are within β·tol of the optimum
        assert!((a.y_star - b.y_star).norm() < 2.0 * 2.0 * tol);
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let q = QuadraticObjective::new(DMatrix::identity(1, 1) * 10.0, 1.0).unwrap();
        let cfg = SolverConfig {
            kind: SolverKind::Gd,
            step: StepPolicy::Fixed { eta: 1.0 },
            max_iters: 1000,
            tol: 1e-6,
            hyper: AdaptiveParams::default(),
        };
        let err =
            solve_lft(&q, &DVector::from_element(1, 1.0), &cfg, DVector::zeros(1)).unwrap_err();
        assert!(matches!(err, Error::Divergence { iter } if iter > 1));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::newton(1e-3, 10);
        cfg.max_iters = 0;
        assert!(cfg.validate().is_err());
        assert!(SolverConfig::newton(0.0, 10).validate().is_err());
        assert!(SolverConfig::for_kind(SolverKind::Agd, 1.0, None).is_err());
        assert_eq!("adam".parse::<SolverKind>().unwrap(), SolverKind::Adam);
    }

    #[test]
    fn trace_csv_has_expected_columns() {
        let q = QuadraticObjective::new(DMatrix::identity(2, 2), 1.0).unwrap();
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let cfg = SolverConfig::for_kind(SolverKind::Gd, q.strong_convexity(), None).unwrap();
        let (res, rows) = solve_lft_traced(&q, &x, &cfg, DVector::zeros(2)).unwrap();
        assert_eq!(rows.len(), res.iters + 1);
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,residual,objective_value\n"));
    }
}
