use nalgebra::{DMatrix, DVector};

use super::activation::ActivationKind;
use super::params::Parameters;
use crate::error::{check_dim, Error, Result};

/// One layer of the gated recursion `z' = g(W_gate z + W_input y + b)`.
///
/// Layer 0 has no gate matrix. The last layer is the scalar head and is not
/// activated.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnLayer {
    pub w_gate: Option<DMatrix<f64>>,
    pub w_input: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl IcnnLayer {
    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    fn zeros_like(&self) -> Self {
        IcnnLayer {
            w_gate: self
                .w_gate
                .as_ref()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols())),
            w_input: DMatrix::zeros(self.w_input.nrows(), self.w_input.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

/// Weights of an input-convex network `G(y)` with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnParams {
    pub layers: Vec<IcnnLayer>,
    pub activation: ActivationKind,
    pub input_dim: usize,
}

/// Per-parameter gradients laid out like [`IcnnParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnGrad {
    pub layers: Vec<IcnnLayer>,
}

/// Intermediate values of a forward pass, kept for the derivative passes.
struct Tape {
    /// Pre-activations of the hidden layers.
    pre: Vec<DVector<f64>>,
    /// Activated outputs of the hidden layers.
    post: Vec<DVector<f64>>,
    value: f64,
}

impl IcnnParams {
    /// Validates shapes and the gate invariants.
    pub fn new(
        layers: Vec<IcnnLayer>,
        activation: ActivationKind,
        input_dim: usize,
    ) -> Result<Self> {
        let params = IcnnParams {
            layers,
            activation,
            input_dim,
        };
        params.validate()?;
        Ok(params)
    }

    /// `G ≡ 0`: a single affine head with zero weights.
    pub fn zero(input_dim: usize, activation: ActivationKind) -> Self {
        IcnnParams {
            layers: vec![IcnnLayer {
                w_gate: None,
                w_input: DMatrix::zeros(1, input_dim),
                bias: DVector::zeros(1),
            }],
            activation,
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig(
                "an ICNN needs at least one layer".into(),
            ));
        }
        let mut prev: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.out_dim();
            if layer.w_input.nrows() != out || layer.w_input.ncols() != self.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "layer {i}: w_input is {}x{}, expected {out}x{}",
                    layer.w_input.nrows(),
                    layer.w_input.ncols(),
                    self.input_dim
                )));
            }
            match (&layer.w_gate, prev) {
                (None, None) => {}
                (Some(_), None) => {
                    return Err(Error::InvalidConfig(
                        "layer 0 must not have a gate matrix".into(),
                    ))
                }
                (None, Some(_)) => {
                    return Err(Error::InvalidConfig(format!(
                        "layer {i} is missing its gate matrix"
                    )))
                }
                (Some(w), Some(p)) => {
                    if w.nrows() != out || w.ncols() != p {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: w_gate is {}x{}, expected {out}x{p}",
                            w.nrows(),
                            w.ncols()
                        )));
                    }
                }
            }
            prev = Some(out);
        }
        if prev != Some(1) {
            return Err(Error::InvalidConfig(
                "the final layer must map to a scalar".into(),
            ));
        }
        Ok(())
    }

    /// Hidden widths, excluding the input dimension and the scalar head.
    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(IcnnLayer::out_dim)
            .collect()
    }

    fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    fn tape(&self, y: &DVector<f64>) -> Result<Tape> {
        check_dim(self.input_dim, y.len(), "icnn input")?;
        let hidden = self.hidden_count();
        let mut pre = Vec::with_capacity(hidden);
        let mut post: Vec<DVector<f64>> = Vec::with_capacity(hidden);
        for layer in &self.layers[..hidden] {
            let mut a = &layer.w_input * y + &layer.bias;
            if let (Some(w), Some(z)) = (&layer.w_gate, post.last()) {
                a.gemv(1.0, w, z, 1.0);
            }
            let z = a.map(|v| self.activation.value(v));
            pre.push(a);
            post.push(z);
        }
        let head = &self.layers[hidden];
        let mut out = (&head.w_input * y)[0] + head.bias[0];
        if let (Some(w), Some(z)) = (&head.w_gate, post.last()) {
            out += (w * z)[0];
        }
        Ok(Tape {
            pre,
            post,
            value: out,
        })
    }

    /// `G(y)`.
    pub fn value(&self, y: &DVector<f64>) -> Result<f64> {
        Ok(self.tape(y)?.value)
    }

    /// Adjoints of the hidden pre-activations, `dG/da_i`, from a reverse pass.
    fn pre_adjoints(&self, tape: &Tape) -> Vec<DVector<f64>> {
        let hidden = self.hidden_count();
        let mut adj = vec![DVector::zeros(0); hidden];
        // dG/dz of the current layer's output
        let mut dz: Option<DVector<f64>> = self.layers[hidden]
            .w_gate
            .as_ref()
            .map(|w| w.row(0).transpose());
        for i in (0..hidden).rev() {
            let dz_i = dz.take().expect("gate present above every hidden layer");
            let da = dz_i.zip_map(&tape.pre[i], |d, a| d * self.activation.first(a));
            if let Some(w) = &self.layers[i].w_gate {
                dz = Some(w.tr_mul(&da));
            }
            adj[i] = da;
        }
        adj
    }

    /// `∇_y G(y)`.
    pub fn grad(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.value_and_grad(y)?.1)
    }

    pub fn value_and_grad(&self, y: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let tape = self.tape(y)?;
        let hidden = self.hidden_count();
        let mut g = self.layers[hidden].w_input.row(0).transpose();
        for (layer, da) in self.layers.iter().zip(self.pre_adjoints(&tape)) {
            g.gemv_tr(1.0, &layer.w_input, &da, 1.0);
        }
        Ok((tape.value, g))
    }

    /// `∇²_y G(y)`, assembled as `Σ_i J_iᵀ diag(c_i) J_i` where `J_i` is the
    /// Jacobian of the i-th pre-activation and `c_i = (dG/dz_{i+1}) g''(a_i)`.
    pub fn hessian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !self.activation.is_smooth() {
            return Err(Error::UnsupportedActivation { op: "icnn_hessian" });
        }
        let tape = self.tape(y)?;
        let adj = self.pre_adjoints(&tape);
        let d = self.input_dim;
        let mut h = DMatrix::zeros(d, d);
        let mut jac: Option<DMatrix<f64>> = None;
        for i in 0..self.hidden_count() {
            let layer = &self.layers[i];
            let mut j = layer.w_input.clone();
            if let (Some(w), Some(prev)) = (&layer.w_gate, jac.as_ref()) {
                // J_i = W_gate diag(g'(a_{i-1})) J_{i-1} + W_input
                let mut scaled = prev.clone();
                for (r, a) in tape.pre[i - 1].iter().enumerate() {
                    let s = self.activation.first(*a);
                    scaled.row_mut(r).scale_mut(s);
                }
                j.gemm(1.0, w, &scaled, 1.0);
            }
            // dG/dz_{i+1} = da_i / g'(a_i) would divide by zero, so rebuild it
            // from the layer above.
            let dz_next = self.dz_after(i, &adj);
            let mut weighted = j.clone();
            for (r, a) in tape.pre[i].iter().enumerate() {
                let c = dz_next[r] * self.activation.second(*a).unwrap_or(0.0);
                weighted.row_mut(r).scale_mut(c);
            }
            h.gemm_tr(1.0, &j, &weighted, 1.0);
            jac = Some(j);
        }
        Ok(symmetrize(h))
    }

    /// `dG/dz_{i+1}`, the adjoint of the output of hidden layer `i`.
    fn dz_after(&self, i: usize, adj: &[DVector<f64>]) -> DVector<f64> {
        let above = &self.layers[i + 1];
        let w = above
            .w_gate
            .as_ref()
            .expect("gate present above every hidden layer");
        if i + 1 == self.hidden_count() {
            w.row(0).transpose()
        } else {
            w.tr_mul(&adj[i + 1])
        }
    }

    /// Gradient with respect to every parameter of `s(θ) = vᵀ ∇_y G(y; θ)`.
    ///
    /// `s` is the directional derivative of `G` along `v`, so this runs a
    /// tangent pass alongside the primal pass and reverses through both.
    pub fn grad_param_vjp(&self, y: &DVector<f64>, v: &DVector<f64>) -> Result<IcnnGrad> {
        if !self.activation.is_smooth() {
            return Err(Error::UnsupportedActivation {
                op: "icnn_param_vjp_of_grad",
            });
        }
        check_dim(self.input_dim, v.len(), "icnn vjp direction")?;
        let tape = self.tape(y)?;
        let act = self.activation;
        let hidden = self.hidden_count();

        // tangent pass
        let mut tan_pre: Vec<DVector<f64>> = Vec::with_capacity(hidden);
        let mut tan_post: Vec<DVector<f64>> = Vec::with_capacity(hidden);
        for (i, layer) in self.layers[..hidden].iter().enumerate() {
            let mut da = &layer.w_input * v;
            if let (Some(w), Some(dz)) = (&layer.w_gate, tan_post.last()) {
                da.gemv(1.0, w, dz, 1.0);
            }
            let dz = da.zip_map(&tape.pre[i], |t, a| t * act.first(a));
            tan_pre.push(da);
            tan_post.push(dz);
        }

        let mut grads = IcnnGrad {
            layers: self.layers.iter().map(IcnnLayer::zeros_like).collect(),
        };

        // adjoints of the primal and tangent pre-activations at the head
        let mut bar_a = DVector::zeros(1);
        let mut bar_t = DVector::from_element(1, 1.0);
        for i in (0..=hidden).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            g.w_input.ger(1.0, &bar_t, v, 1.0);
            g.w_input.ger(1.0, &bar_a, y, 1.0);
            g.bias += &bar_a;
            if i == 0 {
                break;
            }
            let w = layer.w_gate.as_ref().expect("gate on layers above 0");
            let z = &tape.post[i - 1];
            let dz = &tan_post[i - 1];
            let gw = g.w_gate.as_mut().expect("gate grad on layers above 0");
            gw.ger(1.0, &bar_t, dz, 1.0);
            gw.ger(1.0, &bar_a, z, 1.0);
            let bar_dz = w.tr_mul(&bar_t);
            let bar_z = w.tr_mul(&bar_a);
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
        }
        Ok(grads)
    }

    /// Clamps every gate weight at zero. Other weights are left alone.
    pub fn project_nonneg(&mut self) {
        for layer in &mut self.layers {
            if let Some(w) = &mut layer.w_gate {
                w.apply(|v| *v = v.max(0.0));
            }
        }
    }

    pub fn min_gate_weight(&self) -> Option<f64> {
        self.layers
            .iter()
            .filter_map(|l| l.w_gate.as_ref())
            .flat_map(|w| w.iter().copied())
            .reduce(f64::min)
    }

    /// Forward value with `delta` added to the activated output of hidden
    /// layer `layer`. Used to probe monotonicity in the gated path.
    pub fn value_with_injection(
        &self,
        y: &DVector<f64>,
        layer: usize,
        delta: &DVector<f64>,
    ) -> Result<f64> {
        check_dim(self.input_dim, y.len(), "icnn input")?;
        let hidden = self.hidden_count();
        if layer >= hidden {
            return Err(Error::InvalidConfig(format!("no hidden layer {layer}")));
        }
        let mut z: Option<DVector<f64>> = None;
        for (i, l) in self.layers[..hidden].iter().enumerate() {
            let mut a = &l.w_input * y + &l.bias;
            if let (Some(w), Some(prev)) = (&l.w_gate, z.as_ref()) {
                a.gemv(1.0, w, prev, 1.0);
            }
            let mut next = a.map(|v| self.activation.value(v));
            if i == layer {
                check_dim(next.len(), delta.len(), "injected perturbation")?;
                next += delta;
            }
            z = Some(next);
        }
        let head = &self.layers[hidden];
        let mut out = (&head.w_input * y)[0] + head.bias[0];
        if let (Some(w), Some(prev)) = (&head.w_gate, z.as_ref()) {
            out += (w * prev)[0];
        }
        Ok(out)
    }
}

pub(crate) fn symmetrize(h: DMatrix<f64>) -> DMatrix<f64> {
    let ht = h.transpose();
    (h + ht) * 0.5
}

fn layers_len(layers: &[IcnnLayer]) -> usize {
    layers
        .iter()
        .map(|l| l.w_gate.as_ref().map_or(0, |w| w.len()) + l.w_input.len() + l.bias.len())
        .sum()
}

fn layers_flat(layers: &[IcnnLayer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers_len(layers));
    for l in layers {
        if let Some(w) = &l.w_gate {
            out.extend_from_slice(w.as_slice());
        }
        out.extend_from_slice(l.w_input.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    out
}

fn layers_set_flat(layers: &mut [IcnnLayer], flat: &[f64]) {
    assert_eq!(flat.len(), layers_len(layers), "flat parameter length");
    let mut off = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[off..off + dst.len()]);
        off += dst.len();
    };
    for l in layers {
        if let Some(w) = &mut l.w_gate {
            take(w.as_mut_slice());
        }
        take(l.w_input.as_mut_slice());
        take(l.bias.as_mut_slice());
    }
}

fn layers_gate_mask(layers: &[IcnnLayer]) -> Vec<bool> {
    let mut out = Vec::with_capacity(layers_len(layers));
    for l in layers {
        if let Some(w) = &l.w_gate {
            out.extend(std::iter::repeat_n(true, w.len()));
        }
        out.extend(std::iter::repeat_n(false, l.w_input.len() + l.bias.len()));
    }
    out
}

impl Parameters for IcnnParams {
    fn num_params(&self) -> usize {
        layers_len(&self.layers)
    }
    fn to_flat(&self) -> Vec<f64> {
        layers_flat(&self.layers)
    }
    fn set_flat(&mut self, flat: &[f64]) {
        layers_set_flat(&mut self.layers, flat)
    }
    fn nonneg_mask(&self) -> Vec<bool> {
        layers_gate_mask(&self.layers)
    }
}

impl Parameters for IcnnGrad {
    fn num_params(&self) -> usize {
        layers_len(&self.layers)
    }
    fn to_flat(&self) -> Vec<f64> {
        layers_flat(&self.layers)
    }
    fn set_flat(&mut self, flat: &[f64]) {
        layers_set_flat(&mut self.layers, flat)
    }
    fn nonneg_mask(&self) -> Vec<bool> {
        layers_gate_mask(&self.layers)
    }
}

impl IcnnGrad {
    pub fn zeros_like(params: &IcnnParams) -> Self {
        IcnnGrad {
            layers: params.layers.iter().map(IcnnLayer::zeros_like).collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            if let Some(w) = &mut l.w_gate {
                *w *= c;
            }
            l.w_input *= c;
            l.bias *= c;
        }
    }
}
