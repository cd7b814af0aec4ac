use nalgebra::{DMatrix, DVector};

use super::activation::ActivationKind;
use super::icnn::symmetrize;
use super::params::Parameters;
use crate::error::{check_dim, Error, Result};

/// Layer sizes of a partially input-convex network.
///
/// `hidden` are the widths of the gated (convex) path and `u_hidden` the
/// widths of the non-convex path; both have one entry per hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PicnnDims {
    pub convex: usize,
    pub nonconvex: usize,
    pub hidden: Vec<usize>,
    pub u_hidden: Vec<usize>,
}

impl PicnnDims {
    pub fn validate(&self) -> Result<()> {
        if self.convex == 0 || self.nonconvex == 0 {
            return Err(Error::InvalidConfig(
                "PICNN input dimensions must be positive".into(),
            ));
        }
        if self.hidden.len() != self.u_hidden.len() {
            return Err(Error::InvalidConfig(
                "PICNN needs one non-convex width per hidden layer".into(),
            ));
        }
        if self.hidden.iter().chain(&self.u_hidden).any(|&h| h == 0) {
            return Err(Error::InvalidConfig("PICNN widths must be positive".into()));
        }
        Ok(())
    }

    /// Widths of `u_0 = x, u_1, ..., u_{L-1}`.
    pub fn u_widths(&self) -> Vec<usize> {
        std::iter::once(self.nonconvex)
            .chain(self.u_hidden.iter().copied())
            .collect()
    }

    /// Output widths of the gated layers, ending with the scalar head.
    pub fn z_widths(&self) -> Vec<usize> {
        self.hidden
            .iter()
            .copied()
            .chain(std::iter::once(1))
            .collect()
    }
}

/// `u_{i+1} = g(W u_i + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UPathLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// One gated layer:
/// `a = W_z (z ⊙ [W_zu u + b_z]_+) + W_y (y ⊙ (W_yu u + b_y)) + W_u u + b`.
/// The `z` terms are absent on layer 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PicnnLayer {
    pub w_z: Option<DMatrix<f64>>,
    pub w_zu: Option<DMatrix<f64>>,
    pub b_z: Option<DVector<f64>>,
    pub w_y: DMatrix<f64>,
    pub w_yu: DMatrix<f64>,
    pub b_y: DVector<f64>,
    pub w_u: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicnnParams {
    pub u_path: Vec<UPathLayer>,
    pub layers: Vec<PicnnLayer>,
    pub activation: ActivationKind,
    pub dims: PicnnDims,
}

/// Per-parameter gradients shaped like [`PicnnParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PicnnGrad {
    pub u_path: Vec<UPathLayer>,
    pub layers: Vec<PicnnLayer>,
}

struct Tape {
    u: Vec<DVector<f64>>,
    u_pre: Vec<DVector<f64>>,
    /// `W_zu u + b_z` before the positive part, per layer (empty on layer 0).
    gate_pre: Vec<DVector<f64>>,
    gate_z: Vec<DVector<f64>>,
    gate_y: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
    post: Vec<DVector<f64>>,
    value: f64,
}

fn zeros_m(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::zeros(m.nrows(), m.ncols())
}

fn zeros_v(v: &DVector<f64>) -> DVector<f64> {
    DVector::zeros(v.len())
}

impl PicnnParams {
    pub fn new(
        u_path: Vec<UPathLayer>,
        layers: Vec<PicnnLayer>,
        activation: ActivationKind,
        dims: PicnnDims,
    ) -> Result<Self> {
        let p = PicnnParams {
            u_path,
            layers,
            activation,
            dims,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let uw = self.dims.u_widths();
        let zw = self.dims.z_widths();
        let d = self.dims.convex;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.u_path.len() != self.dims.hidden.len() || self.layers.len() != zw.len() {
            return bad("PICNN layer count does not match its dims".into());
        }
        for (i, l) in self.u_path.iter().enumerate() {
            if l.weight.shape() != (uw[i + 1], uw[i]) || l.bias.len() != uw[i + 1] {
                return bad(format!("u-path layer {i} has the wrong shape"));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let (out, u) = (zw[i], uw[i]);
            let shapes_ok = l.w_y.shape() == (out, d)
                && l.w_yu.shape() == (d, u)
                && l.b_y.len() == d
                && l.w_u.shape() == (out, u)
                && l.bias.len() == out;
            let gate_ok = if i == 0 {
                l.w_z.is_none() && l.w_zu.is_none() && l.b_z.is_none()
            } else {
                let p = zw[i - 1];
                matches!((&l.w_z, &l.w_zu, &l.b_z), (Some(a), Some(b), Some(c))
                    if a.shape() == (out, p) && b.shape() == (p, u) && c.len() == p)
            };
            if !shapes_ok || !gate_ok {
                return bad(format!("gated layer {i} has the wrong shape"));
            }
        }
        Ok(())
    }

    fn tape(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<Tape> {
        check_dim(self.dims.nonconvex, x.len(), "picnn non-convex input")?;
        check_dim(self.dims.convex, y.len(), "picnn convex input")?;
        let act = self.activation;
        let mut u = vec![x.clone()];
        let mut u_pre = Vec::with_capacity(self.u_path.len());
        for l in &self.u_path {
            let a = &l.weight * u.last().unwrap() + &l.bias;
            u.push(a.map(|v| act.value(v)));
            u_pre.push(a);
        }
        let n = self.layers.len();
        let mut tape = Tape {
            u,
            u_pre,
            gate_pre: Vec::with_capacity(n),
            gate_z: Vec::with_capacity(n),
            gate_y: Vec::with_capacity(n),
            pre: Vec::with_capacity(n - 1),
            post: Vec::with_capacity(n - 1),
            value: 0.0,
        };
        for (i, l) in self.layers.iter().enumerate() {
            let ui = &tape.u[i];
            let gy = &l.w_yu * ui + &l.b_y;
            let mut a = &l.w_y * y.component_mul(&gy) + &l.w_u * ui + &l.bias;
            if i > 0 {
                let gp = l.w_zu.as_ref().unwrap() * ui + l.b_z.as_ref().unwrap();
                let gz = gp.map(|v| v.max(0.0));
                a.gemv(
                    1.0,
                    l.w_z.as_ref().unwrap(),
                    &tape.post[i - 1].component_mul(&gz),
                    1.0,
                );
                tape.gate_pre.push(gp);
                tape.gate_z.push(gz);
            } else {
                tape.gate_pre.push(DVector::zeros(0));
                tape.gate_z.push(DVector::zeros(0));
            }
            tape.gate_y.push(gy);
            if i + 1 < n {
                tape.post.push(a.map(|v| act.value(v)));
                tape.pre.push(a);
            } else {
                tape.value = a[0];
            }
        }
        Ok(tape)
    }

    pub fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        Ok(self.tape(x, y)?.value)
    }

    /// Adjoints `dG/da_i` for every gated layer (the head included, as 1).
    fn pre_adjoints(&self, tape: &Tape) -> Vec<DVector<f64>> {
        let n = self.layers.len();
        let mut adj = vec![DVector::zeros(0); n];
        adj[n - 1] = DVector::from_element(1, 1.0);
        for i in (1..n).rev() {
            let l = &self.layers[i];
            let dz = l
                .w_z
                .as_ref()
                .unwrap()
                .tr_mul(&adj[i])
                .component_mul(&tape.gate_z[i]);
            adj[i - 1] = dz.zip_map(&tape.pre[i - 1], |d, a| d * self.activation.first(a));
        }
        adj
    }

    /// `∇_y G(x, y)`.
    pub fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.value_and_grad_y(x, y)?.1)
    }

    pub fn value_and_grad_y(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>)> {
        let tape = self.tape(x, y)?;
        let mut g = DVector::zeros(self.dims.convex);
        for ((l, da), gy) in self
            .layers
            .iter()
            .zip(self.pre_adjoints(&tape))
            .zip(&tape.gate_y)
        {
            g += l.w_y.tr_mul(&da).component_mul(gy);
        }
        Ok((tape.value, g))
    }

    /// `∇²_y G(x, y)`.
    pub fn hessian_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !self.activation.is_smooth() {
            return Err(Error::UnsupportedActivation {
                op: "picnn_hessian_y",
            });
        }
        let tape = self.tape(x, y)?;
        let adj = self.pre_adjoints(&tape);
        let act = self.activation;
        let d = self.dims.convex;
        let mut h = DMatrix::zeros(d, d);
        let mut jac: Option<DMatrix<f64>> = None;
        for i in 0..self.layers.len() - 1 {
            let l = &self.layers[i];
            // J_i = W_y diag(gy) + W_z diag(gz ⊙ g'(a_{i-1})) J_{i-1}
            let mut j = l.w_y.clone();
            for (c, gy) in tape.gate_y[i].iter().enumerate() {
                j.column_mut(c).scale_mut(*gy);
            }
            if let Some(prev) = &jac {
                let mut scaled = prev.clone();
                for r in 0..scaled.nrows() {
                    let s = tape.gate_z[i][r] * act.first(tape.pre[i - 1][r]);
                    scaled.row_mut(r).scale_mut(s);
                }
                j.gemm(1.0, l.w_z.as_ref().unwrap(), &scaled, 1.0);
            }
            let above = &self.layers[i + 1];
            let dz = above
                .w_z
                .as_ref()
                .unwrap()
                .tr_mul(&adj[i + 1])
                .component_mul(&tape.gate_z[i + 1]);
            let mut weighted = j.clone();
            for r in 0..weighted.nrows() {
                let c = dz[r] * act.second(tape.pre[i][r]).unwrap_or(0.0);
                weighted.row_mut(r).scale_mut(c);
            }
            h.gemm_tr(1.0, &j, &weighted, 1.0);
            jac = Some(j);
        }
        Ok(symmetrize(h))
    }

    /// Gradients of `s = vᵀ ∇_y G(x, y)` with respect to every parameter and
    /// with respect to `x`.
    fn tangent_reverse(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<(PicnnGrad, DVector<f64>)> {
        if !self.activation.is_smooth() {
            return Err(Error::UnsupportedActivation {
                op: "picnn_param_vjp_of_grad_y",
            });
        }
        check_dim(self.dims.convex, v.len(), "picnn vjp direction")?;
        let tape = self.tape(x, y)?;
        let act = self.activation;
        let n = self.layers.len();

        // tangent of the gated path along v (x held fixed)
        let mut tan_pre: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut tan_post: Vec<DVector<f64>> = Vec::with_capacity(n);
        for (i, l) in self.layers.iter().enumerate() {
            let mut t = &l.w_y * v.component_mul(&tape.gate_y[i]);
            if i > 0 {
                t.gemv(
                    1.0,
                    l.w_z.as_ref().unwrap(),
                    &tan_post[i - 1].component_mul(&tape.gate_z[i]),
                    1.0,
                );
            }
            if i + 1 < n {
                tan_post.push(t.zip_map(&tape.pre[i], |t, a| t * act.first(a)));
            }
            tan_pre.push(t);
        }

        let mut g = PicnnGrad::zeros_like(self);
        let mut bar_u: Vec<DVector<f64>> = tape.u.iter().map(zeros_v).collect();
        let mut bar_a = DVector::zeros(1);
        let mut bar_t = DVector::from_element(1, 1.0);
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let gl = &mut g.layers[i];
            let ui = &tape.u[i];
            let gy = &tape.gate_y[i];

            // y terms: t += W_y (v ⊙ gy), a += W_y (y ⊙ gy)
            gl.w_y.ger(1.0, &bar_t, &v.component_mul(gy), 1.0);
            gl.w_y.ger(1.0, &bar_a, &y.component_mul(gy), 1.0);
            let bar_gy =
                l.w_y.tr_mul(&bar_t).component_mul(v) + l.w_y.tr_mul(&bar_a).component_mul(y);
            gl.w_yu.ger(1.0, &bar_gy, ui, 1.0);
            gl.b_y += &bar_gy;
            bar_u[i].gemv_tr(1.0, &l.w_yu, &bar_gy, 1.0);

            // direct u term and bias
            gl.w_u.ger(1.0, &bar_a, ui, 1.0);
            gl.bias += &bar_a;
            bar_u[i].gemv_tr(1.0, &l.w_u, &bar_a, 1.0);

            if i > 0 {
                let wz = l.w_z.as_ref().unwrap();
                let gz = &tape.gate_z[i];
                let z = &tape.post[i - 1];
                let dz = &tan_post[i - 1];
                let gwz = gl.w_z.as_mut().unwrap();
                gwz.ger(1.0, &bar_t, &dz.component_mul(gz), 1.0);
                gwz.ger(1.0, &bar_a, &z.component_mul(gz), 1.0);
                let p_t = wz.tr_mul(&bar_t);
                let p_a = wz.tr_mul(&bar_a);
                let bar_dz = p_t.component_mul(gz);
                let bar_z = p_a.component_mul(gz);
                let bar_gz = p_t.component_mul(dz) + p_a.component_mul(z);
                let bar_gp =
                    bar_gz.zip_map(&tape.gate_pre[i], |b, p| if p > 0.0 { b } else { 0.0 });
                gl.w_zu.as_mut().unwrap().ger(1.0, &bar_gp, ui, 1.0);
                *gl.b_z.as_mut().unwrap() += &bar_gp;
                bar_u[i].gemv_tr(1.0, l.w_zu.as_ref().unwrap(), &bar_gp, 1.0);

                let a = &tape.pre[i - 1];
                let ta = &tan_pre[i - 1];
                let mut next_t = DVector::zeros(a.len());
                let mut next_a = DVector::zeros(a.len());
                for k in 0..a.len() {
                    let g1 = act.first(a[k]);
                    let g2 = act.second(a[k]).unwrap_or(0.0);
                    next_t[k] = bar_dz[k] * g1;
                    next_a[k] = bar_z[k] * g1 + bar_dz[k] * g2 * ta[k];
                }
                bar_t = next_t;
                bar_a = next_a;

                // u_i is complete now; push it through the u-path layer below
                let ul = &self.u_path[i - 1];
                let bar_pre = bar_u[i].zip_map(&tape.u_pre[i - 1], |b, p| b * act.first(p));
                g.u_path[i - 1]
                    .weight
                    .ger(1.0, &bar_pre, &tape.u[i - 1], 1.0);
                g.u_path[i - 1].bias += &bar_pre;
                let back = ul.weight.tr_mul(&bar_pre);
                bar_u[i - 1] += back;
            }
        }
        let bar_x = bar_u.swap_remove(0);
        Ok((g, bar_x))
    }

    /// `∂_θ (vᵀ ∇_y G(x, y))` for every parameter.
    pub fn grad_y_param_vjp(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<PicnnGrad> {
        Ok(self.tangent_reverse(x, y, v)?.0)
    }

    /// `∂_x (vᵀ ∇_y G(x, y))`.
    pub fn grad_x_vjp(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(self.tangent_reverse(x, y, v)?.1)
    }

    pub fn project_nonneg(&mut self) {
        for l in &mut self.layers {
            if let Some(w) = &mut l.w_z {
                w.apply(|v| *v = v.max(0.0));
            }
        }
    }
}

impl PicnnGrad {
    pub fn zeros_like(p: &PicnnParams) -> Self {
        PicnnGrad {
            u_path: p
                .u_path
                .iter()
                .map(|l| UPathLayer {
                    weight: zeros_m(&l.weight),
                    bias: zeros_v(&l.bias),
                })
                .collect(),
            layers: p
                .layers
                .iter()
                .map(|l| PicnnLayer {
                    w_z: l.w_z.as_ref().map(zeros_m),
                    w_zu: l.w_zu.as_ref().map(zeros_m),
                    b_z: l.b_z.as_ref().map(zeros_v),
                    w_y: zeros_m(&l.w_y),
                    w_yu: zeros_m(&l.w_yu),
                    b_y: zeros_v(&l.b_y),
                    w_u: zeros_m(&l.w_u),
                    bias: zeros_v(&l.bias),
                })
                .collect(),
        }
    }
}

/// Visits every parameter block in a fixed order. The flag marks blocks
/// that must stay nonnegative.
fn visit_blocks<'a>(
    u_path: &'a [UPathLayer],
    layers: &'a [PicnnLayer],
    mut f: impl FnMut(&'a [f64], bool),
) {
    for l in u_path {
        f(l.weight.as_slice(), false);
        f(l.bias.as_slice(), false);
    }
    for l in layers {
        if let Some(w) = &l.w_z {
            f(w.as_slice(), true);
        }
        if let Some(w) = &l.w_zu {
            f(w.as_slice(), false);
        }
        if let Some(b) = &l.b_z {
            f(b.as_slice(), false);
        }
        f(l.w_y.as_slice(), false);
        f(l.w_yu.as_slice(), false);
        f(l.b_y.as_slice(), false);
        f(l.w_u.as_slice(), false);
        f(l.bias.as_slice(), false);
    }
}

fn visit_blocks_mut(
    u_path: &mut [UPathLayer],
    layers: &mut [PicnnLayer],
    mut f: impl FnMut(&mut [f64]),
) {
    for l in u_path {
        f(l.weight.as_mut_slice());
        f(l.bias.as_mut_slice());
    }
    for l in layers {
        if let Some(w) = &mut l.w_z {
            f(w.as_mut_slice());
        }
        if let Some(w) = &mut l.w_zu {
            f(w.as_mut_slice());
        }
        if let Some(b) = &mut l.b_z {
            f(b.as_mut_slice());
        }
        f(l.w_y.as_mut_slice());
        f(l.w_yu.as_mut_slice());
        f(l.b_y.as_mut_slice());
        f(l.w_u.as_mut_slice());
        f(l.bias.as_mut_slice());
    }
}

macro_rules! impl_picnn_parameters {
    ($t:ty) => {
        impl Parameters for $t {
            fn num_params(&self) -> usize {
                let mut n = 0;
                visit_blocks(&self.u_path, &self.layers, |b, _| n += b.len());
                n
            }
            fn to_flat(&self) -> Vec<f64> {
                let mut out = Vec::new();
                visit_blocks(&self.u_path, &self.layers, |b, _| out.extend_from_slice(b));
                out
            }
            fn set_flat(&mut self, flat: &[f64]) {
                assert_eq!(flat.len(), self.num_params(), "flat parameter length");
                let mut off = 0;
                visit_blocks_mut(&mut self.u_path, &mut self.layers, |b| {
                    b.copy_from_slice(&flat[off..off + b.len()]);
                    off += b.len();
                });
            }
            fn nonneg_mask(&self) -> Vec<bool> {
                let mut out = Vec::new();
                visit_blocks(&self.u_path, &self.layers, |b, nn| {
                    out.extend(std::iter::repeat_n(nn, b.len()))
                });
                out
            }
        }
    };
}

impl_picnn_parameters!(PicnnParams);
impl_picnn_parameters!(PicnnGrad);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexnet::icnn::{IcnnLayer, IcnnParams};
    use crate::convexnet::init::{init_picnn, InitScheme};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> PicnnDims {
        PicnnDims {
            convex: 2,
            nonconvex: 3,
            hidden: vec![4, 3],
            u_hidden: vec![3, 2],
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_net(seed: u64) -> PicnnParams {
        let mut p = init_picnn(
            &dims(),
            ActivationKind::Softplus,
            InitScheme::XavierClamp,
            seed,
        )
        .unwrap();
        // mixed-sign gate offsets so the positive part is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in &mut p.layers {
            if let Some(b) = &mut l.b_z {
                b.apply(|v| *v = rng.random_range(-0.5..1.5));
            }
        }
        p
    }

    fn zero_gated(mut p: PicnnParams, c: f64) -> PicnnParams {
        for l in &mut p.layers {
            for m in [l.w_z.as_mut(), l.w_zu.as_mut()].into_iter().flatten() {
                m.fill(0.0);
            }
            l.w_y.fill(0.0);
            l.w_yu.fill(0.0);
            l.w_u.fill(0.0);
            l.bias.fill(0.0);
        }
        p.layers.last_mut().unwrap().bias[0] = c;
        p
    }

    /// ICNN with the same gated weights as a PICNN whose u-path is muted.
    fn muted_pair(seed: u64) -> (PicnnParams, IcnnParams) {
        let mut p = random_net(seed);
        for l in &mut p.layers {
            if let Some(w) = &mut l.w_zu {
                w.fill(0.0);
            }
            if let Some(b) = &mut l.b_z {
                b.fill(1.0);
            }
            l.w_yu.fill(0.0);
            l.b_y.fill(1.0);
            l.w_u.fill(0.0);
        }
        let icnn = IcnnParams::new(
            p.layers
                .iter()
                .map(|l| IcnnLayer {
                    w_gate: l.w_z.clone(),
                    w_input: l.w_y.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
            p.activation,
            p.dims.convex,
        )
        .unwrap();
        (p, icnn)
    }

    #[test]
    fn constant_when_gated_path_is_zero() {
        let p = zero_gated(random_net(0), 1.25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let x = rand_vec(&mut rng, 3);
            let y = rand_vec(&mut rng, 2);
            assert_eq!(p.value(&x, &y).unwrap(), 1.25);
        }
    }

    #[test]
    fn reduces_to_icnn_without_u_influence() {
        let (p, icnn) = muted_pair(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = rand_vec(&mut rng, 3);
            let y = rand_vec(&mut rng, 2);
            assert_relative_eq!(
                p.value(&x, &y).unwrap(),
                icnn.value(&y).unwrap(),
                epsilon = 1e-12
            );
            let gp = p.grad_y(&x, &y).unwrap();
            let gi = icnn.grad(&y).unwrap();
            assert_relative_eq!(gp, gi, epsilon = 1e-12);
            assert_relative_eq!(
                p.hessian_y(&x, &y).unwrap(),
                icnn.hessian(&y).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn forward_matches_naive_recursion() {
        let p = random_net(4);
        let x = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let y = DVector::from_vec(vec![0.5, -0.5]);
        let sp = |v: f64| (1.0 + v.exp()).ln();
        let matvec = |m: &DMatrix<f64>, v: &[f64]| -> Vec<f64> {
            (0..m.nrows())
                .map(|r| (0..m.ncols()).map(|c| m[(r, c)] * v[c]).sum())
                .collect()
        };
        let mut u: Vec<f64> = x.iter().copied().collect();
        let mut z: Vec<f64> = Vec::new();
        let mut out = 0.0;
        for (i, l) in p.layers.iter().enumerate() {
            let gy: Vec<f64> = matvec(&l.w_yu, &u)
                .iter()
                .zip(l.b_y.iter())
                .map(|(a, b)| a + b)
                .collect();
            let ygy: Vec<f64> = y.iter().zip(&gy).map(|(a, b)| a * b).collect();
            let mut a: Vec<f64> = matvec(&l.w_y, &ygy);
            for (k, t) in matvec(&l.w_u, &u).into_iter().enumerate() {
                a[k] += t + l.bias[k];
            }
            if i > 0 {
                let gz: Vec<f64> = matvec(l.w_zu.as_ref().unwrap(), &u)
                    .iter()
                    .zip(l.b_z.as_ref().unwrap().iter())
                    .map(|(a, b)| (a + b).max(0.0))
                    .collect();
                let zg: Vec<f64> = z.iter().zip(&gz).map(|(a, b)| a * b).collect();
                for (k, t) in matvec(l.w_z.as_ref().unwrap(), &zg).into_iter().enumerate() {
                    a[k] += t;
                }
            }
            if i + 1 < p.layers.len() {
                z = a.iter().map(|v| sp(*v)).collect();
                let ul = &p.u_path[i];
                u = matvec(&ul.weight, &u)
                    .iter()
                    .zip(ul.bias.iter())
                    .map(|(a, b)| sp(a + b))
                    .collect();
            } else {
                out = a[0];
            }
        }
        assert_relative_eq!(p.value(&x, &y).unwrap(), out, epsilon = 1e-12);
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..3 {
            let mut p = random_net(seed);
            let x = rand_vec(&mut rng, 3);
            let y = rand_vec(&mut rng, 2);
            let v = rand_vec(&mut rng, 2);
            let h = 1e-5;

            let g = p.grad_y(&x, &y).unwrap();
            let hess = p.hessian_y(&x, &y).unwrap();
            for k in 0..2 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[k] += h;
                ym[k] -= h;
                let fd = (p.value(&x, &yp).unwrap() - p.value(&x, &ym).unwrap()) / (2.0 * h);
                assert!(rel(g[k], fd) < 1e-4);
                let col = (p.grad_y(&x, &yp).unwrap() - p.grad_y(&x, &ym).unwrap()) / (2.0 * h);
                for r in 0..2 {
                    assert!(
                        rel(hess[(r, k)], col[r]) < 1e-4,
                        "{} vs {}",
                        hess[(r, k)],
                        col[r]
                    );
                }
            }
            assert_eq!((&hess - hess.transpose()).amax(), 0.0);
            assert!(hess.clone().symmetric_eigen().eigenvalues.min() >= -1e-9);

            let s = |p: &PicnnParams, x: &DVector<f64>| p.grad_y(x, &y).unwrap().dot(&v);
            let gx = p.grad_x_vjp(&x, &y, &v).unwrap();
            for k in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (s(&p, &xp) - s(&p, &xm)) / (2.0 * h);
                assert!(rel(gx[k], fd) < 1e-4, "x[{k}]: {} vs {}", gx[k], fd);
            }

            let gp = p.grad_y_param_vjp(&x, &y, &v).unwrap().to_flat();
            let base = p.to_flat();
            for k in 0..base.len() {
                let mut plus = base.clone();
                plus[k] += h;
                p.set_flat(&plus);
                let sp = s(&p, &x);
                plus[k] -= 2.0 * h;
                p.set_flat(&plus);
                let sm = s(&p, &x);
                let fd = (sp - sm) / (2.0 * h);
                assert!(rel(gp[k], fd) < 1e-4, "param {k}: {} vs {}", gp[k], fd);
            }
            p.set_flat(&base);
        }
    }

    #[test]
    fn zero_direction_gives_zero_vjps() {
        let p = random_net(1);
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let y = DVector::from_vec(vec![-0.3, 0.4]);
        let z = DVector::zeros(2);
        assert!(p
            .grad_y_param_vjp(&x, &y, &z)
            .unwrap()
            .to_flat()
            .iter()
            .all(|g| *g == 0.0));
        assert!(p.grad_x_vjp(&x, &y, &z).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn convex_in_y_for_fixed_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..50 {
            let p = random_net(seed);
            let x = rand_vec(&mut rng, 3) * 2.0;
            let y1 = rand_vec(&mut rng, 2) * 3.0;
            let y2 = rand_vec(&mut rng, 2) * 3.0;
            let t: f64 = rng.random();
            let lhs = p.value(&x, &(&y1 * t + &y2 * (1.0 - t))).unwrap();
            let rhs = t * p.value(&x, &y1).unwrap() + (1.0 - t) * p.value(&x, &y2).unwrap();
            assert!(lhs <= rhs + 1e-9);
        }
    }

    #[test]
    fn projection_keeps_gate_invariant() {
        let mut p = random_net(2);
        p.layers[1].w_z.as_mut().unwrap()[(0, 0)] = -1.0;
        p.project_nonneg();
        let flat = p.to_flat();
        for (v, nn) in flat.iter().zip(p.nonneg_mask()) {
            if nn {
                assert!(*v >= 0.0);
            }
        }
    }
}
