use std::f64::consts::PI;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoonsConfig {
    pub n_samples: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

impl MoonsConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        MoonsConfig {
            n_samples,
            noise: default_noise(),
            seed,
        }
    }
}

/// Two interleaving half circles. Class 0 is the upper arc `(cos t, sin t)`
/// and class 1 the lower arc `(1 − cos t, 0.5 − sin t)`, `t` evenly spaced
/// on `[0, π]`, plus isotropic Gaussian noise. Samples come out shuffled.
pub fn two_moons(cfg: &MoonsConfig) -> Result<(Vec<DVector<f64>>, Vec<usize>)> {
    if cfg.n_samples < 2 {
        return Err(Error::InvalidConfig(
            "two moons needs at least two samples".into(),
        ));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise must be >= 0, got {}",
            cfg.noise
        )));
    }
    let n_upper = cfg.n_samples / 2;
    let n_lower = cfg.n_samples - n_upper;
    let arc = |n: usize| -> Vec<f64> {
        match n {
            1 => vec![0.0],
            _ => (0..n).map(|i| PI * i as f64 / (n - 1) as f64).collect(),
        }
    };
    let mut points = Vec::with_capacity(cfg.n_samples);
    for t in arc(n_upper) {
        points.push((DVector::from_vec(vec![t.cos(), t.sin()]), 0));
    }
    for t in arc(n_lower) {
        points.push((DVector::from_vec(vec![1.0 - t.cos(), 0.5 - t.sin()]), 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    points.shuffle(&mut rng);
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("positive noise");
        for (p, _) in &mut points {
            p.apply(|v| *v += normal.sample(&mut rng));
        }
    }
    Ok(points.into_iter().unzip())
}

/// Axis-aligned bounding box of the points, widened by `pad` times its
/// extent on every side.
pub fn padded_bounds(points: &[DVector<f64>], pad: f64) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..2 {
        let span = hi[k] - lo[k];
        lo[k] -= pad * span;
        hi[k] += pad * span;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn noiseless_arc_endpoints() {
        let cfg = MoonsConfig {
            n_samples: 10,
            noise: 0.0,
            seed: 0,
        };
        let (pts, labels) = two_moons(&cfg).unwrap();
        let upper: Vec<_> = pts
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == 0)
            .map(|(p, _)| p.clone())
            .collect();
        assert!(upper
            .iter()
            .any(|p| (p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12));
        let lower: Vec<_> = pts
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == 1)
            .map(|(p, _)| p.clone())
            .collect();
        assert!(lower
            .iter()
            .any(|p| p[0].abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12));
        for p in &upper {
            assert_relative_eq!(p.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quarter_turn_on_the_upper_arc() {
        let cfg = MoonsConfig {
            n_samples: 6,
            noise: 0.0,
            seed: 1,
        };
        let (pts, _) = two_moons(&cfg).unwrap();
        // three upper points at t = 0, π/2, π
        assert!(pts
            .iter()
            .any(|p| p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn balanced_and_reproducible() {
        for n in [7, 100, 1501] {
            let (_, labels) = two_moons(&MoonsConfig::new(n, 3)).unwrap();
            let ones = labels.iter().filter(|l| **l == 1).count();
            assert!((ones as i64 - (n - ones) as i64).abs() <= 1);
        }
        assert_eq!(
            two_moons(&MoonsConfig::new(50, 9)).unwrap(),
            two_moons(&MoonsConfig::new(50, 9)).unwrap()
        );
        assert!(two_moons(&MoonsConfig::new(1, 0)).is_err());
    }

    #[test]
    fn padding_widens_the_box() {
        let pts = vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 2.0]),
        ];
        let (lo, hi) = padded_bounds(&pts, 0.4);
        assert_relative_eq!(lo[0], -0.4);
        assert_relative_eq!(hi[1], 2.8);
    }
}
