use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

/// A strongly convex function `F` whose conjugate argmax the solvers compute.
pub trait ConvexObjective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, y: &DVector<f64>) -> Result<f64>;
    fn grad(&self, y: &DVector<f64>) -> Result<DVector<f64>>;
    fn hessian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// Lower bound `μ` on the curvature.
    fn strong_convexity(&self) -> f64;
    /// Upper bound `γ` on the curvature when one is known analytically.
    fn smoothness(&self) -> Option<f64> {
        None
    }
}

/// `F(y) = ½ yᵀ M y + ‖y‖² / (2β)` with `M` symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    m: DMatrix<f64>,
    beta: f64,
    mu: f64,
    gamma: f64,
}

impl QuadraticObjective {
    pub fn new(m: DMatrix<f64>, beta: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidConfig("quadratic form must be square".into()));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive, got {beta}"
            )));
        }
        let m = (&m + m.transpose()) * 0.5;
        let eig = m.clone().symmetric_eigen().eigenvalues;
        if eig.min() < -1e-12 {
            return Err(Error::InvalidConfig(
                "quadratic form must be positive semidefinite".into(),
            ));
        }
        Ok(QuadraticObjective {
            mu: eig.min().max(0.0) + 1.0 / beta,
            gamma: eig.max().max(0.0) + 1.0 / beta,
            m,
            beta,
        })
    }

    /// `(M + I/β)⁻¹ x`, the exact conjugate argmax.
    pub fn exact_argmax(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len(), "quadratic argmax")?;
        let a = &self.m + DMatrix::identity(self.dim(), self.dim()) / self.beta;
        a.cholesky()
            .map(|c| c.solve(x))
            .ok_or(Error::SingularHessian {
                condition: f64::INFINITY,
            })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl ConvexObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn value(&self, y: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), y.len(), "quadratic objective")?;
        Ok(0.5 * y.dot(&(&self.m * y)) + y.norm_squared() / (2.0 * self.beta))
    }

    fn grad(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), y.len(), "quadratic objective")?;
        Ok(&self.m * y + y / self.beta)
    }

    fn hessian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), y.len(), "quadratic objective")?;
        Ok(&self.m + DMatrix::identity(self.dim(), self.dim()) / self.beta)
    }

    fn strong_convexity(&self) -> f64 {
        self.mu
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.gamma)
    }
}

/// Largest gradient-difference ratio `‖∇F(a) − ∇F(b)‖ / ‖a − b‖` over random
/// pairs in the box `[lo, hi]^d`. A sampled lower estimate of `γ`.
pub fn estimate_smoothness<O: ConvexObjective + ?Sized>(
    obj: &O,
    lo: f64,
    hi: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::InvalidConfig(format!(
            "empty sampling box [{lo}, {hi}]"
        )));
    }
    let d = obj.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(lo, hi).expect("lo < hi");
    let mut best = obj.strong_convexity();
    for _ in 0..n_pairs {
        let a = DVector::from_fn(d, |_, _| dist.sample(&mut rng));
        let b = DVector::from_fn(d, |_, _| dist.sample(&mut rng));
        let gap = (&a - &b).norm();
        if gap < 1e-12 {
            continue;
        }
        let ratio = (obj.grad(&a)? - obj.grad(&b)?).norm() / gap;
        best = best.max(ratio);
    }
    Ok(best)
}

/// Largest Hessian eigenvalue over the given points.
pub fn max_curvature<O: ConvexObjective + ?Sized>(obj: &O, points: &[DVector<f64>]) -> Result<f64> {
    let mut best = obj.strong_convexity();
    for p in points {
        let h = obj.hessian(p)?;
        best = best.max(h.symmetric_eigen().eigenvalues.max());
    }
    Ok(best)
}
