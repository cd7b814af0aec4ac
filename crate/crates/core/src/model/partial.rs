use nalgebra::{DMatrix, DVector};

use super::blnn::{conjugate_map, BlnnConfig, STATIONARITY_SLACK};
use super::cache::{SampleKey, WarmCache};
use crate::convexnet::{Parameters, PicnnGrad, PicnnParams};
use crate::error::{check_dim, Error, Result};
use crate::lft::{condition_estimate, ConvexObjective, LftResult, SolverConfig};

/// `F(y) = G(x_nc, y) + yᵀ diag(q) y / 2` with the nonconvex input held fixed.
#[derive(Debug, Clone, Copy)]
pub struct PartialObjective<'a> {
    pub core: &'a PicnnParams,
    pub x_nonconvex: &'a DVector<f64>,
    pub curvature: &'a DVector<f64>,
}

impl ConvexObjective for PartialObjective<'_> {
    fn dim(&self) -> usize {
        self.core.dims.convex
    }

    fn value(&self, y: &DVector<f64>) -> Result<f64> {
        let quad: f64 = y
            .iter()
            .zip(self.curvature.iter())
            .map(|(v, q)| q * v * v)
            .sum();
        Ok(self.core.value(self.x_nonconvex, y)? + 0.5 * quad)
    }

    fn grad(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.core.grad_y(self.x_nonconvex, y)? + y.component_mul(self.curvature))
    }

    fn hessian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = self.core.hessian_y(self.x_nonconvex, y)?;
        for (i, q) in self.curvature.iter().enumerate() {
            h[(i, i)] += q;
        }
        Ok(h)
    }

    fn strong_convexity(&self) -> f64 {
        self.curvature.min()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialTrace {
    pub x_nonconvex: DVector<f64>,
    pub x_block: DVector<f64>,
    pub lft: LftResult,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PblnnGrad {
    pub params: PicnnGrad,
    pub input_block: DVector<f64>,
    pub input_nonconvex: DVector<f64>,
}

/// Bi-Lipschitz in the convex block only. The nonconvex input conditions the
/// core through the PICNN u-path and is returned unchanged by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Pblnn {
    pub core: PicnnParams,
    pub config: BlnnConfig,
    curvature: DVector<f64>,
    skip: DVector<f64>,
}

impl Pblnn {
    pub fn new(core: PicnnParams, config: BlnnConfig) -> Result<Self> {
        let d = core.dims.convex;
        config.validate(Some(d))?;
        Ok(Pblnn {
            curvature: config.curvature(d),
            skip: config.skip(d),
            core,
            config,
        })
    }

    pub fn block_dim(&self) -> usize {
        self.core.dims.convex
    }

    pub fn nonconvex_dim(&self) -> usize {
        self.core.dims.nonconvex
    }

    pub fn objective<'a>(&'a self, x_nonconvex: &'a DVector<f64>) -> PartialObjective<'a> {
        PartialObjective {
            core: &self.core,
            x_nonconvex,
            curvature: &self.curvature,
        }
    }

    pub fn forward(
        &self,
        x_nonconvex: &DVector<f64>,
        x_block: &DVector<f64>,
        solver: &SolverConfig,
        warm: Option<(&WarmCache, SampleKey)>,
    ) -> Result<(DVector<f64>, PartialTrace)> {
        check_dim(
            self.nonconvex_dim(),
            x_nonconvex.len(),
            "pblnn nonconvex input",
        )?;
        check_dim(self.block_dim(), x_block.len(), "pblnn block input")?;
        let y0 = warm
            .as_ref()
            .and_then(|(c, k)| c.lookup(*k, x_block))
            .filter(|y| y.len() == self.block_dim())
            .unwrap_or_else(|| DVector::zeros(self.block_dim()));
        let (out, lft) = conjugate_map(
            &self.objective(x_nonconvex),
            &self.skip,
            x_block,
            solver,
            y0,
        )?;
        if let (Some((cache, key)), true) = (warm, lft.converged) {
            cache.insert(key, x_block, &lft.y_star);
        }
        Ok((
            out,
            PartialTrace {
                x_nonconvex: x_nonconvex.clone(),
                x_block: x_block.clone(),
                lft,
                tol: solver.tol,
            },
        ))
    }

    pub fn forward_value(
        &self,
        x_nonconvex: &DVector<f64>,
        x_block: &DVector<f64>,
        solver: &SolverConfig,
    ) -> Result<DVector<f64>> {
        Ok(self.forward(x_nonconvex, x_block, solver, None)?.0)
    }

    /// Gradients for the core, the block input, and the nonconvex input.
    /// `y*` depends on `x_nc` through the stationarity condition, so the
    /// nonconvex input gradient is `−∂_x(vᵀ∇_y G)` with `v = H⁻¹ grad_out`.
    pub fn backward(&self, trace: &PartialTrace, grad_out: &DVector<f64>) -> Result<PblnnGrad> {
        check_dim(self.block_dim(), grad_out.len(), "pblnn output gradient")?;
        let limit = STATIONARITY_SLACK * trace.tol;
        if !(trace.lft.residual <= limit) {
            return Err(Error::NotStationary {
                residual: trace.lft.residual,
                limit,
            });
        }
        let y = &trace.lft.y_star;
        let h = self.objective(&trace.x_nonconvex).hessian(y)?;
        let cond = condition_estimate(&h);
        let chol = h
            .cholesky()
            .ok_or(Error::SingularHessian { condition: cond })?;
        let v = chol.solve(grad_out);
        let mut params = self.core.grad_y_param_vjp(&trace.x_nonconvex, y, &v)?;
        let flat: Vec<f64> = params.to_flat().iter().map(|g| -g).collect();
        params.set_flat(&flat);
        let input_nonconvex = -self.core.grad_x_vjp(&trace.x_nonconvex, y, &v)?;
        let input_block = &v + self.skip.component_mul(grad_out);
        Ok(PblnnGrad {
            params,
            input_block,
            input_nonconvex,
        })
    }
}
