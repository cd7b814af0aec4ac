use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cache::{SampleKey, WarmCache};
use crate::convexnet::{IcnnGrad, IcnnParams};
use crate::error::{check_dim, Error, Result};
use crate::lft::{condition_estimate, solve_lft, ConvexObjective, LftResult, SolverConfig};

/// Backward passes refuse forward results whose residual exceeds this
/// multiple of the solver tolerance.
pub const STATIONARITY_SLACK: f64 = 100.0;

/// Per-dimension weights replacing `α` and `β`: the network adds
/// `xᵀA²x/2` and `yᵀB⁻²y/2` with `A = diag(a)`, `B = diag(b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalWeights {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// The two control parameters of an `(α, β)` network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlnnConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted: Option<DiagonalWeights>,
}

impl BlnnConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let cfg = BlnnConfig {
            alpha,
            beta,
            weighted: None,
        };
        cfg.validate(None)?;
        Ok(cfg)
    }

    pub fn weighted(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let alpha = a.iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
        let beta = b.iter().map(|v| v * v).fold(0.0, f64::max);
        let cfg = BlnnConfig {
            alpha,
            beta,
            weighted: Some(DiagonalWeights { a, b }),
        };
        cfg.validate(None)?;
        Ok(cfg)
    }

    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if let Some(w) = &self.weighted {
            if w.a.len() != w.b.len() || dim.is_some_and(|d| d != w.a.len()) {
                return Err(Error::InvalidConfig(
                    "weight vectors must match the input dimension".into(),
                ));
            }
            if w.a.iter().any(|v| !(*v >= 0.0)) || w.b.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidConfig("weights need a >= 0 and b > 0".into()));
            }
        }
        Ok(())
    }

    /// Diagonal of the quadratic added to the core, `1/β` or `1/b_i²`.
    pub(crate) fn curvature(&self, dim: usize) -> DVector<f64> {
        match &self.weighted {
            Some(w) => DVector::from_iterator(dim, w.b.iter().map(|b| 1.0 / (b * b))),
            None => DVector::from_element(dim, 1.0 / self.beta),
        }
    }

    /// Diagonal of the skip term, `α` or `a_i²`.
    pub(crate) fn skip(&self, dim: usize) -> DVector<f64> {
        match &self.weighted {
            Some(w) => DVector::from_iterator(dim, w.a.iter().map(|a| a * a)),
            None => DVector::from_element(dim, self.alpha),
        }
    }

    /// Certified inverse-Lipschitz and Lipschitz constants.
    pub fn bounds(&self) -> (f64, f64) {
        match &self.weighted {
            Some(w) => {
                let lo = w.a.iter().map(|a| a * a).fold(f64::INFINITY, f64::min);
                let hi =
                    w.a.iter()
                        .zip(&w.b)
                        .map(|(a, b)| a * a + b * b)
                        .fold(0.0, f64::max);
                (lo, hi)
            }
            None => (self.alpha, self.alpha + self.beta),
        }
    }
}

/// `F(y) = G(y) + yᵀ diag(q) y / 2` with `G` an ICNN.
#[derive(Debug, Clone, Copy)]
pub struct BlnnObjective<'a> {
    pub core: &'a IcnnParams,
    pub curvature: &'a DVector<f64>,
}

impl ConvexObjective for BlnnObjective<'_> {
    fn dim(&self) -> usize {
        self.core.input_dim
    }

    fn value(&self, y: &DVector<f64>) -> Result<f64> {
        let quad: f64 = y
            .iter()
            .zip(self.curvature.iter())
            .map(|(v, q)| q * v * v)
            .sum();
        Ok(self.core.value(y)? + 0.5 * quad)
    }

    fn grad(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.core.grad(y)? + y.component_mul(self.curvature))
    }

    fn hessian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = self.core.hessian(y)?;
        for (i, q) in self.curvature.iter().enumerate() {
            h[(i, i)] += q;
        }
        Ok(h)
    }

    fn strong_convexity(&self) -> f64 {
        self.curvature.min()
    }
}

/// `argmax_y {⟨y, x⟩ − F(y)} + skip ⊙ x` for any strongly convex `F`.
pub fn conjugate_map<O: ConvexObjective + ?Sized>(
    obj: &O,
    skip: &DVector<f64>,
    x: &DVector<f64>,
    solver: &SolverConfig,
    y0: DVector<f64>,
) -> Result<(DVector<f64>, LftResult)> {
    check_dim(obj.dim(), skip.len(), "skip weights")?;
    let lft = solve_lft(obj, x, solver, y0)?;
    Ok((&lft.y_star + skip.component_mul(x), lft))
}

/// What a backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub x: DVector<f64>,
    pub lft: LftResult,
    pub tol: f64,
}

/// An `(α, β)` bi-Lipschitz network:
/// `f(x) = argmax_y {⟨y, x⟩ − G(y) − ‖y‖²/(2β)} + αx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blnn {
    pub core: IcnnParams,
    pub config: BlnnConfig,
    curvature: DVector<f64>,
    skip: DVector<f64>,
}

impl Blnn {
    pub fn new(core: IcnnParams, config: BlnnConfig) -> Result<Self> {
        config.validate(Some(core.input_dim))?;
        let d = core.input_dim;
        Ok(Blnn {
            curvature: config.curvature(d),
            skip: config.skip(d),
            core,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.core.input_dim
    }

    pub fn set_config(&mut self, config: BlnnConfig) -> Result<()> {
        config.validate(Some(self.dim()))?;
        self.curvature = config.curvature(self.dim());
        self.skip = config.skip(self.dim());
        self.config = config;
        Ok(())
    }

    pub fn objective(&self) -> BlnnObjective<'_> {
        BlnnObjective {
            core: &self.core,
            curvature: &self.curvature,
        }
    }

    /// Runs the conjugate-argmax solve and adds the skip term.
    ///
    /// With a cache the solve starts from the last converged point stored
    /// under `key` (or the zero vector) and stores the new optimum when the
    /// solve converges. A solve that hits `max_iters` still returns the last
    /// iterate; `trace.lft.converged` tells the caller.
    pub fn forward(
        &self,
        x: &DVector<f64>,
        solver: &SolverConfig,
        warm: Option<(&WarmCache, SampleKey)>,
    ) -> Result<(DVector<f64>, ForwardTrace)> {
        check_dim(self.dim(), x.len(), "blnn input")?;
        let y0 = warm
            .as_ref()
            .and_then(|(c, k)| c.lookup(*k, x))
            .filter(|y| y.len() == self.dim())
            .unwrap_or_else(|| DVector::zeros(self.dim()));
        let (out, lft) = conjugate_map(&self.objective(), &self.skip, x, solver, y0)?;
        if let (Some((cache, key)), true) = (warm, lft.converged) {
            cache.insert(key, x, &lft.y_star);
        }
        Ok((
            out,
            ForwardTrace {
                x: x.clone(),
                lft,
                tol: solver.tol,
            },
        ))
    }

    pub fn forward_value(&self, x: &DVector<f64>, solver: &SolverConfig) -> Result<DVector<f64>> {
        Ok(self.forward(x, solver, None)?.0)
    }

    fn hessian_at(&self, trace: &ForwardTrace) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let limit = STATIONARITY_SLACK * trace.tol;
        if !(trace.lft.residual <= limit) {
            return Err(Error::NotStationary {
                residual: trace.lft.residual,
                limit,
            });
        }
        let h = self.objective().hessian(&trace.lft.y_star)?;
        let cond = condition_estimate(&h);
        h.cholesky()
            .ok_or(Error::SingularHessian { condition: cond })
    }

    /// Gradient of the loss with respect to the core parameters, given the
    /// loss gradient `grad_out` at the output:
    /// `−∂_θ(vᵀ∇_y G(y*))` with `v = (∇²F(y*))⁻¹ grad_out`.
    pub fn backward_params(
        &self,
        trace: &ForwardTrace,
        grad_out: &DVector<f64>,
    ) -> Result<IcnnGrad> {
        Ok(self.backward(trace, grad_out)?.0)
    }

    /// `grad_outᵀ ((∇²F(y*))⁻¹ + αI)`, the loss gradient at the input.
    pub fn input_vjp(&self, trace: &ForwardTrace, grad_out: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.backward(trace, grad_out)?.1)
    }

    /// Both gradients from a single Hessian factorization.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_out: &DVector<f64>,
    ) -> Result<(IcnnGrad, DVector<f64>)> {
        check_dim(self.dim(), grad_out.len(), "blnn output gradient")?;
        let chol = self.hessian_at(trace)?;
        let v = chol.solve(grad_out);
        let mut g = self.core.grad_param_vjp(&trace.lft.y_star, &v)?;
        g.scale(-1.0);
        let input = &v + self.skip.component_mul(grad_out);
        Ok((g, input))
    }

    /// Input Jacobian `(∇²F(y*))⁻¹ + diag(skip)` at a forward result.
    pub fn input_jacobian(&self, trace: &ForwardTrace) -> Result<DMatrix<f64>> {
        let chol = self.hessian_at(trace)?;
        let mut j = chol.inverse();
        for i in 0..self.dim() {
            j[(i, i)] += self.skip[i];
        }
        Ok(crate::convexnet::symmetrize(j))
    }
}
