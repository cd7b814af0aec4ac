//! Empirical bi-Lipschitz constants from pairwise sampling.

use nalgebra::DVector;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Up to this many points every pair is used.
pub const ALL_PAIRS_LIMIT: usize = 2000;
/// Pairs drawn at random above [`ALL_PAIRS_LIMIT`].
pub const RANDOM_PAIRS: usize = 1_000_000;
pub const DEFAULT_MIN_SEP: f64 = 1e-6;

/// An axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Domain {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(Error::InvalidConfig(
                "domain bounds must be non-empty and of equal length".into(),
            ));
        }
        if self
            .lo
            .iter()
            .zip(&self.hi)
            .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::InvalidConfig(
                "domain needs finite lo <= hi in every coordinate".into(),
            ));
        }
        Ok(())
    }

    /// `n` points drawn uniformly from the box.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dists: Vec<Option<Uniform<f64>>> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| Uniform::new_inclusive(*l, *h).ok())
            .collect();
        Ok((0..n)
            .map(|_| {
                DVector::from_iterator(
                    self.dim(),
                    dists
                        .iter()
                        .zip(&self.lo)
                        .map(|(d, l)| d.map_or(*l, |d| d.sample(&mut rng))),
                )
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub domain: Domain,
    pub n_samples: usize,
    pub seed: u64,
    pub min_sep: f64,
}

impl SamplerConfig {
    pub fn new(domain: Domain, n_samples: usize, seed: u64) -> Self {
        SamplerConfig {
            domain,
            n_samples,
            seed,
            min_sep: DEFAULT_MIN_SEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLipEstimate {
    /// Largest pairwise ratio `‖f(a) − f(b)‖ / ‖a − b‖`.
    pub lip_hat: f64,
    /// Smallest pairwise ratio.
    pub invlip_hat: f64,
    pub n_pairs: usize,
    pub seed: u64,
    pub domain: Option<Domain>,
}

/// Samples the domain, evaluates `f` at every point in parallel and scans
/// the pairs.
pub fn estimate_bilip<F>(f: F, sampler: &SamplerConfig) -> Result<BiLipEstimate>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    if sampler.n_samples < 2 {
        return Err(Error::InvalidConfig(
            "at least two samples are needed".into(),
        ));
    }
    let xs = sampler.domain.sample(sampler.n_samples, sampler.seed)?;
    let fx = xs.par_iter().map(&f).collect::<Result<Vec<_>>>()?;
    let mut est = estimate_from_points(&xs, &fx, sampler.min_sep, sampler.seed)?;
    est.domain = Some(sampler.domain.clone());
    Ok(est)
}

/// Pairwise ratios over precomputed `(x, f(x))` samples. Unordered pairs
/// suffice since the ratio is symmetric.
pub fn estimate_from_points(
    xs: &[DVector<f64>],
    fx: &[DVector<f64>],
    min_sep: f64,
    seed: u64,
) -> Result<BiLipEstimate> {
    if xs.len() != fx.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: fx.len(),
            context: "estimator outputs",
        });
    }
    let n = xs.len();
    let ratio = |i: usize, j: usize| -> Option<f64> {
        let gap = (&xs[i] - &xs[j]).norm();
        (gap >= min_sep).then(|| (&fx[i] - &fx[j]).norm() / gap)
    };
    let fold = |acc: (f64, f64, usize), r: Option<f64>| match r {
        Some(r) => (acc.0.max(r), acc.1.min(r), acc.2 + 1),
        None => acc,
    };
    let merge =
        |a: (f64, f64, usize), b: (f64, f64, usize)| (a.0.max(b.0), a.1.min(b.1), a.2 + b.2);
    let init = (f64::NEG_INFINITY, f64::INFINITY, 0);

    let (lip, invlip, count) = if n <= ALL_PAIRS_LIMIT {
        (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| ratio(i, j)).fold(init, fold))
            .reduce(|| init, merge)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let pairs: Vec<(usize, usize)> = (0..RANDOM_PAIRS)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        pairs
            .par_iter()
            .map(|&(i, j)| ratio(i, j))
            .fold(|| init, fold)
            .reduce(|| init, merge)
    };
    if count == 0 {
        return Err(Error::NoValidPairs { min_sep });
    }
    Ok(BiLipEstimate {
        lip_hat: lip,
        invlip_hat: invlip,
        n_pairs: count,
        seed,
        domain: None,
    })
}

/// `100 · lip_hat / bound`, in percent.
pub fn tightness(lip_hat: f64, bound: f64) -> Result<f64> {
    if !(bound > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "bound must be positive, got {bound}"
        )));
    }
    Ok(100.0 * lip_hat / bound)
}
