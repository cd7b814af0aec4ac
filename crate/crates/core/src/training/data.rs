use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target functions for the one-dimensional regression tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// `x` for `x ≤ 0`, `x + 1` otherwise.
    Step,
    Linear {
        slope: f64,
    },
    Exp,
}

impl Target {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Target::Step => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x
                }
            }
            Target::Linear { slope } => slope * x,
            Target::Exp => x.exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Step => "step",
            Target::Linear { .. } => "linear",
            Target::Exp => "exp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset1D {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub target: Target,
}

impl Dataset1D {
    /// `n` inputs drawn uniformly from `[lo, hi]`.
    pub fn sample(target: Target, n: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        let dist = Uniform::new_inclusive(lo, hi)
            .map_err(|e| Error::InvalidConfig(format!("range [{lo}, {hi}]: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Ok(Self::from_inputs(target, xs))
    }

    /// `n` evenly spaced inputs covering `[lo, hi]`.
    pub fn grid(target: Target, n: usize, lo: f64, hi: f64) -> Self {
        let xs = match n {
            0 => vec![],
            1 => vec![0.5 * (lo + hi)],
            _ => (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect(),
        };
        Self::from_inputs(target, xs)
    }

    pub fn from_inputs(target: Target, xs: Vec<f64>) -> Self {
        let ys = xs.iter().map(|x| target.eval(*x)).collect();
        Dataset1D { xs, ys, target }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

pub const TRAIN_POINTS: usize = 300;
pub const TRAIN_RANGE: (f64, f64) = (-2.0, 2.0);
pub const TEST_POINTS: usize = 2000;
pub const TEST_RANGE: (f64, f64) = (-1.0, 1.0);

pub fn make_step_dataset(n: usize, lo: f64, hi: f64, seed: u64) -> Result<Dataset1D> {
    Dataset1D::sample(Target::Step, n, lo, hi, seed)
}

pub fn make_linear_dataset(slope: f64, n: usize, lo: f64, hi: f64, seed: u64) -> Result<Dataset1D> {
    Dataset1D::sample(Target::Linear { slope }, n, lo, hi, seed)
}

pub fn make_exp_dataset(n: usize, lo: f64, hi: f64, seed: u64) -> Result<Dataset1D> {
    Dataset1D::sample(Target::Exp, n, lo, hi, seed)
}

/// The evaluation grid used by the regression experiments.
pub fn test_grid(target: Target) -> Dataset1D {
    Dataset1D::grid(target, TEST_POINTS, TEST_RANGE.0, TEST_RANGE.1)
}
