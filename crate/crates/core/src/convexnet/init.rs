use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::activation::ActivationKind;
use super::icnn::{IcnnLayer, IcnnParams};
use super::picnn::{PicnnDims, PicnnLayer, PicnnParams, UPathLayer};
use crate::error::{Error, Result};

/// How gate (nonnegative) weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum InitScheme {
    /// Glorot-uniform draw, then negative entries clamped to zero.
    #[default]
    XavierClamp,
    Uniform {
        lo: f64,
        hi: f64,
    },
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform_matrix(rng, rows, cols, -bound, bound)
}

pub(crate) fn uniform_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> DMatrix<f64> {
    if lo == hi {
        return DMatrix::from_element(rows, cols, lo);
    }
    let dist = Uniform::new(lo, hi).expect("lo < hi");
    // row-major draw order so the layout matches the serialized form
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = dist.sample(rng);
        }
    }
    m
}

pub(crate) fn bias(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> DVector<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    DVector::from_fn(n, |_, _| dist.sample(rng))
}

impl InitScheme {
    fn validate(self) -> Result<()> {
        if let InitScheme::Uniform { lo, hi } = self {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "uniform init needs lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn gate(self, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        match self {
            InitScheme::XavierClamp => xavier(rng, rows, cols).map(|v| v.max(0.0)),
            InitScheme::Uniform { lo, hi } => uniform_matrix(rng, rows, cols, lo, hi),
        }
    }
}

/// Random ICNN with `hidden` activated layers followed by a scalar head.
pub fn init_icnn(
    input_dim: usize,
    hidden: &[usize],
    activation: ActivationKind,
    scheme: InitScheme,
    seed: u64,
) -> Result<IcnnParams> {
    if input_dim == 0 || hidden.contains(&0) {
        return Err(Error::InvalidConfig(
            "ICNN dimensions must be positive".into(),
        ));
    }
    scheme.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut prev: Option<usize> = None;
    for &out in hidden.iter().chain(std::iter::once(&1)) {
        let w_gate = prev.map(|p| scheme.gate(&mut rng, out, p));
        let w_input = xavier(&mut rng, out, input_dim);
        let fan_in = input_dim + prev.unwrap_or(0);
        let b = bias(&mut rng, out, fan_in);
        layers.push(IcnnLayer {
            w_gate,
            w_input,
            bias: b,
        });
        prev = Some(out);
    }
    IcnnParams::new(layers, activation, input_dim)
}

/// Random PICNN. Gate weights follow `scheme`; everything else is Glorot.
pub fn init_picnn(
    dims: &PicnnDims,
    activation: ActivationKind,
    scheme: InitScheme,
    seed: u64,
) -> Result<PicnnParams> {
    dims.validate()?;
    scheme.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.convex;
    let u_widths = dims.u_widths();
    let z_widths = dims.z_widths();
    let mut u_path = Vec::new();
    for i in 0..dims.hidden.len() {
        let (inp, out) = (u_widths[i], u_widths[i + 1]);
        u_path.push(UPathLayer {
            weight: xavier(&mut rng, out, inp),
            bias: bias(&mut rng, out, inp),
        });
    }
    let mut layers = Vec::new();
    for i in 0..z_widths.len() {
        let out = z_widths[i];
        let u = u_widths[i];
        let prev = if i == 0 { None } else { Some(z_widths[i - 1]) };
        let gate = prev.map(|p| {
            (
                scheme.gate(&mut rng, out, p),
                xavier(&mut rng, p, u),
                // positive gate offsets keep the [.]_+ factor active at init
                DVector::from_element(p, 1.0),
            )
        });
        let (w_z, w_zu, b_z) = match gate {
            Some((a, b, c)) => (Some(a), Some(b), Some(c)),
            None => (None, None, None),
        };
        layers.push(PicnnLayer {
            w_z,
            w_zu,
            b_z,
            w_y: xavier(&mut rng, out, d),
            w_yu: xavier(&mut rng, d, u),
            b_y: DVector::from_element(d, 1.0),
            w_u: xavier(&mut rng, out, u),
            bias: bias(&mut rng, out, u + d + prev.unwrap_or(0)),
        });
    }
    PicnnParams::new(u_path, layers, activation, dims.clone())
}
