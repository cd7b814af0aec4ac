use nalgebra::{DMatrix, DVector};

use super::blnn::{Blnn, ForwardTrace};
use super::cache::{SampleKey, WarmCache};
use crate::convexnet::IcnnGrad;
use crate::error::{check_dim, Result};
use crate::lft::SolverConfig;

/// `f₂(D f₁(x))` where `D` is the `d₂ × d₁` matrix with ones on its
/// diagonal. Bi-Lipschitz with constants `(α₁α₂, (α₁+β₁)(α₂+β₂))` when
/// `d₁ ≤ d₂`; only the upper constant survives otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeBlnn {
    pub first: Blnn,
    pub second: Blnn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTrace {
    pub first: ForwardTrace,
    pub second: ForwardTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGrad {
    pub first: IcnnGrad,
    pub second: IcnnGrad,
    /// Loss gradient with respect to the composite input.
    pub input: DVector<f64>,
}

impl CompositeBlnn {
    pub fn new(first: Blnn, second: Blnn) -> Self {
        CompositeBlnn { first, second }
    }

    pub fn input_dim(&self) -> usize {
        self.first.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.second.dim()
    }

    pub fn projector(&self) -> DMatrix<f64> {
        DMatrix::identity(self.output_dim(), self.input_dim())
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.input_dim().min(self.output_dim());
        let mut out = DVector::zeros(self.output_dim());
        out.rows_mut(0, n).copy_from(&v.rows(0, n));
        out
    }

    fn project_back(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.input_dim().min(self.output_dim());
        let mut out = DVector::zeros(self.input_dim());
        out.rows_mut(0, n).copy_from(&v.rows(0, n));
        out
    }

    /// Bounds that hold for the whole composition when `d₁ ≤ d₂`.
    pub fn bounds(&self) -> (f64, f64) {
        let (l1, u1) = self.first.config.bounds();
        let (l2, u2) = self.second.config.bounds();
        (l1 * l2, u1 * u2)
    }

    /// `caches` holds one warm cache per stage.
    pub fn forward(
        &self,
        x: &DVector<f64>,
        solver: &SolverConfig,
        caches: Option<(&WarmCache, &WarmCache, SampleKey)>,
    ) -> Result<(DVector<f64>, CompositeTrace)> {
        check_dim(self.input_dim(), x.len(), "composite input")?;
        let (f1, t1) = self
            .first
            .forward(x, solver, caches.map(|(c, _, k)| (c, k)))?;
        let w = self.project(&f1);
        let (z, t2) = self
            .second
            .forward(&w, solver, caches.map(|(_, c, k)| (c, k)))?;
        Ok((
            z,
            CompositeTrace {
                first: t1,
                second: t2,
            },
        ))
    }

    pub fn forward_value(&self, x: &DVector<f64>, solver: &SolverConfig) -> Result<DVector<f64>> {
        Ok(self.forward(x, solver, None)?.0)
    }

    /// Gradients for both cores and the input, chaining the second stage's
    /// input Jacobian through `Dᵀ` into the first stage.
    pub fn backward(
        &self,
        trace: &CompositeTrace,
        grad_out: &DVector<f64>,
    ) -> Result<CompositeGrad> {
        let (second, gw) = self.second.backward(&trace.second, grad_out)?;
        let g1 = self.project_back(&gw);
        let (first, input) = self.first.backward(&trace.first, &g1)?;
        Ok(CompositeGrad {
            first,
            second,
            input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexnet::{init_icnn, ActivationKind, IcnnParams, InitScheme, Parameters};
    use crate::model::BlnnConfig;
    use approx::assert_relative_eq;

    fn tight() -> SolverConfig {
        SolverConfig::newton(1e-11, 100)
    }

    fn identity_stage(d: usize) -> Blnn {
        Blnn::new(
            IcnnParams::zero(d, ActivationKind::Softplus),
            BlnnConfig::new(0.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn random_stage(d: usize, alpha: f64, beta: f64, seed: u64) -> Blnn {
        let core = init_icnn(
            d,
            &[5, 5],
            ActivationKind::Softplus,
            InitScheme::XavierClamp,
            seed,
        )
        .unwrap();
        Blnn::new(core, BlnnConfig::new(alpha, beta).unwrap()).unwrap()
    }

    #[test]
    fn trivial_cores_project_down() {
        let c = CompositeBlnn::new(identity_stage(2), identity_stage(1));
        let (z, trace) = c
            .forward(&DVector::from_vec(vec![1.0, 1.0]), &tight(), None)
            .unwrap();
        assert_relative_eq!(
            trace.first.lft.y_star,
            DVector::from_vec(vec![1.0, 1.0]),
            epsilon = 1e-12
        );
        assert_relative_eq!(z, DVector::from_vec(vec![1.0]), epsilon = 1e-12);
        assert_eq!(c.projector(), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn identity_second_stage_is_projection_of_first() {
        let first = random_stage(2, 1.0, 2.0, 4);
        let c = CompositeBlnn::new(first.clone(), identity_stage(3));
        let x = DVector::from_vec(vec![0.4, -0.9]);
        let z = c.forward_value(&x, &tight()).unwrap();
        let f1 = first.forward_value(&x, &tight()).unwrap();
        assert_relative_eq!(z, c.projector() * f1, epsilon = 1e-10);
    }

    #[test]
    fn zero_gradient_in_zero_gradient_out() {
        let c = CompositeBlnn::new(random_stage(2, 1.0, 1.0, 0), random_stage(3, 0.5, 1.0, 1));
        let (_, trace) = c
            .forward(&DVector::from_vec(vec![0.1, 0.2]), &tight(), None)
            .unwrap();
        let g = c.backward(&trace, &DVector::zeros(3)).unwrap();
        assert!(g
            .first
            .to_flat()
            .iter()
            .chain(g.second.to_flat().iter())
            .all(|v| *v == 0.0));
        assert!(g.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_second_stage_reduces_to_first_backward() {
        let first = random_stage(2, 1.0, 2.0, 7);
        let c = CompositeBlnn::new(first.clone(), identity_stage(3));
        let x = DVector::from_vec(vec![0.3, 0.8]);
        let (_, trace) = c.forward(&x, &tight(), None).unwrap();
        let g_out = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let got = c.backward(&trace, &g_out).unwrap();
        let (_, t1) = first.forward(&x, &tight(), None).unwrap();
        let expected = first
            .backward_params(&t1, &(c.projector().transpose() * &g_out))
            .unwrap();
        for (a, b) in got.first.to_flat().iter().zip(expected.to_flat()) {
            assert_relative_eq!(*a, b, epsilon = 1e-9, max_relative = 1e-7);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut c = CompositeBlnn::new(random_stage(2, 0.5, 1.5, 2), random_stage(1, 1.0, 1.0, 3));
        let x = DVector::from_vec(vec![0.6, -0.4]);
        let solver = SolverConfig::newton(1e-12, 100);
        let loss = |c: &CompositeBlnn| {
            let z = c.forward_value(&x, &solver).unwrap();
            0.5 * z.norm_squared()
        };
        let (z, trace) = c.forward(&x, &solver, None).unwrap();
        let g = c.backward(&trace, &z).unwrap();
        let h = 1e-6;
        let check = |analytic: &[f64], get: &mut dyn FnMut(usize, f64) -> f64| {
            for (k, a) in analytic.iter().enumerate() {
                let fd = (get(k, h) - get(k, -h)) / (2.0 * h);
                let err = (a - fd).abs() / fd.abs().max(1e-4);
                assert!(err < 1e-4, "param {k}: {a} vs {fd}");
            }
        };
        let base1 = c.first.core.to_flat();
        check(&g.first.to_flat(), &mut |k, d| {
            let mut p = base1.clone();
            p[k] += d;
            c.first.core.set_flat(&p);
            let l = loss(&c);
            c.first.core.set_flat(&base1);
            l
        });
        let base2 = c.second.core.to_flat();
        check(&g.second.to_flat(), &mut |k, d| {
            let mut p = base2.clone();
            p[k] += d;
            c.second.core.set_flat(&p);
            let l = loss(&c);
            c.second.core.set_flat(&base2);
            l
        });
    }
}
