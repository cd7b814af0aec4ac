use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// An affine layer whose weight is used as `V / σ(V)`, with `σ` the top
/// singular value tracked by power iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SnLayer {
    /// Unnormalized weight `V`.
    pub raw: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Left and right singular direction estimates, kept across calls.
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

fn normalized(x: DVector<f64>) -> DVector<f64> {
    let n = x.norm();
    if n > 0.0 {
        x / n
    } else {
        x
    }
}

impl SnLayer {
    pub fn new(raw: DMatrix<f64>, bias: DVector<f64>, u0: DVector<f64>) -> Result<Self> {
        check_dim(raw.nrows(), bias.len(), "sn bias")?;
        check_dim(raw.nrows(), u0.len(), "sn direction")?;
        let u = normalized(u0);
        let v = normalized(raw.tr_mul(&u));
        Ok(SnLayer { raw, bias, u, v })
    }

    pub fn power_iteration(&mut self, iters: usize) {
        for _ in 0..iters {
            self.v = normalized(self.raw.tr_mul(&self.u));
            self.u = normalized(&self.raw * &self.v);
        }
    }

    /// `uᵀ V v` with the stored directions.
    pub fn sigma(&self) -> f64 {
        self.u.dot(&(&self.raw * &self.v))
    }

    pub fn weight(&self) -> DMatrix<f64> {
        &self.raw / self.sigma()
    }
}

/// Runs `power_iters` iterations from the stored directions and returns the
/// normalized weight.
pub fn sn_normalize(layer: &mut SnLayer, power_iters: usize) -> Result<DMatrix<f64>> {
    if power_iters == 0 {
        return Err(Error::InvalidConfig(
            "power_iters must be at least 1".into(),
        ));
    }
    layer.power_iteration(power_iters);
    Ok(layer.weight())
}

/// ReLU network `x ↦ W_k(...relu(W_1 (L x) + b_1)...) + b_k` with every
/// `W_i` spectrally normalized, so the whole map is at most `L`-Lipschitz.
#[derive(Debug, Clone, PartialEq)]
pub struct SnMlp {
    pub layers: Vec<SnLayer>,
    pub scale: f64,
    /// Power iterations run after every optimizer step.
    pub power_iters: usize,
}

/// Cached activations of one forward pass.
struct SnTape {
    weights: Vec<DMatrix<f64>>,
    sigmas: Vec<f64>,
    /// Inputs to each layer.
    inputs: Vec<DVector<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<DVector<f64>>,
    out: DVector<f64>,
}

impl SnMlp {
    /// `widths = [input, hidden..., output]`. Weights and biases follow the
    /// usual `U(±1/√fan_in)` initialization.
    pub fn new(widths: &[usize], scale: f64, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(
                "an MLP needs at least input and output widths, all positive".into(),
            ));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "input scale must be positive, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let raw = DMatrix::from_fn(fan_out, fan_in, |_, _| dist.sample(&mut rng));
            let bias = DVector::from_fn(fan_out, |_, _| dist.sample(&mut rng));
            let u0 = DVector::from_fn(fan_out, |_, _| StandardNormal.sample(&mut rng));
            let mut layer = SnLayer::new(raw, bias, u0)?;
            layer.power_iteration(15);
            layers.push(layer);
        }
        Ok(SnMlp {
            layers,
            scale,
            power_iters: 1,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].raw.ncols()
    }

    fn tape(&self, x: &DVector<f64>) -> Result<SnTape> {
        check_dim(self.input_dim(), x.len(), "sn input")?;
        let k = self.layers.len();
        let sigmas: Vec<f64> = self.layers.iter().map(SnLayer::sigma).collect();
        let weights: Vec<DMatrix<f64>> = self
            .layers
            .iter()
            .zip(&sigmas)
            .map(|(l, s)| &l.raw / *s)
            .collect();
        let mut inputs = Vec::with_capacity(k);
        let mut pre = Vec::with_capacity(k - 1);
        let mut h = x * self.scale;
        for (i, (w, layer)) in weights.iter().zip(&self.layers).enumerate() {
            let a = w * &h + &layer.bias;
            inputs.push(h);
            if i + 1 == k {
                h = a;
            } else {
                h = a.map(|v| v.max(0.0));
                pre.push(a);
            }
        }
        Ok(SnTape {
            weights,
            sigmas,
            inputs,
            pre,
            out: h,
        })
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.tape(x)?.out)
    }

    /// Output and the gradient of `grad_outᵀ f(x)` with respect to the raw
    /// weights and biases, laid out like [`SnMlp::params`]. The singular
    /// directions are held fixed, as in the usual implementation.
    pub fn forward_backward(
        &self,
        x: &DVector<f64>,
        grad_out: &DVector<f64>,
    ) -> Result<(DVector<f64>, Vec<f64>)> {
        let tape = self.tape(x)?;
        check_dim(tape.out.len(), grad_out.len(), "sn output gradient")?;
        let k = self.layers.len();
        let mut blocks: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(k);
        let mut delta = grad_out.clone();
        for i in (0..k).rev() {
            let layer = &self.layers[i];
            let g_w = &delta * tape.inputs[i].transpose();
            let s = tape.sigmas[i];
            let coupling = g_w.dot(&layer.raw) / (s * s);
            let g_raw = &g_w / s - (&layer.u * layer.v.transpose()) * coupling;
            let g_b = delta.clone();
            if i > 0 {
                let back = tape.weights[i].tr_mul(&delta);
                delta = back.zip_map(&tape.pre[i - 1], |d, a| if a > 0.0 { d } else { 0.0 });
            }
            blocks.push((g_raw, g_b));
        }
        blocks.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in &blocks {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b.as_slice());
        }
        Ok((tape.out, flat))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.raw.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            flat.extend_from_slice(l.raw.as_slice());
            flat.extend_from_slice(l.bias.as_slice());
        }
        flat
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.raw.len();
            l.raw.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn renormalize(&mut self) {
        let iters = self.power_iters;
        for l in &mut self.layers {
            l.power_iteration(iters);
        }
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.scale
    }
}
