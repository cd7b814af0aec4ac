use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::training::bce;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuqHeadConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub centroid_dim: usize,
    pub length_scale: f64,
    /// EMA factor for the centroid accumulators.
    pub ema: f64,
}

impl DuqHeadConfig {
    pub fn new(num_classes: usize, feature_dim: usize, centroid_dim: usize) -> Self {
        DuqHeadConfig {
            num_classes,
            feature_dim,
            centroid_dim,
            length_scale: 0.1,
            ema: 0.999,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 || self.centroid_dim == 0 {
            return Err(Error::InvalidConfig(
                "DUQ head dimensions must be positive".into(),
            ));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.ema >= 0.0 && self.ema < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ema must lie in [0, 1), got {}",
                self.ema
            )));
        }
        Ok(())
    }
}

/// RBF head: one projection `W_c` and one centroid `e_c` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DuqHead {
    pub config: DuqHeadConfig,
    pub weights: Vec<DMatrix<f64>>,
    pub centroids: Vec<DVector<f64>>,
    /// EMA class counts `N_c`; `None` until the first update.
    counts: Option<Vec<f64>>,
    /// EMA sums `m_c` of projected features.
    sums: Vec<DVector<f64>>,
}

/// Batch loss with gradients for the features and the projections.
#[derive(Debug, Clone, PartialEq)]
pub struct DuqLossGrad {
    pub loss: f64,
    pub features: Vec<DVector<f64>>,
    pub weights: Vec<DMatrix<f64>>,
}

impl DuqHead {
    /// Projections drawn from `N(0, 2/f)`, centroids from `N(0, 0.05²)`.
    pub fn new(config: DuqHeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, (2.0 / config.feature_dim as f64).sqrt()).expect("finite std");
        let c = Normal::new(0.0, 0.05).expect("finite std");
        let weights = (0..config.num_classes)
            .map(|_| {
                DMatrix::from_fn(config.centroid_dim, config.feature_dim, |_, _| {
                    w.sample(&mut rng)
                })
            })
            .collect();
        let centroids: Vec<DVector<f64>> = (0..config.num_classes)
            .map(|_| DVector::from_fn(config.centroid_dim, |_, _| c.sample(&mut rng)))
            .collect();
        Ok(DuqHead {
            config,
            weights,
            sums: centroids.clone(),
            centroids,
            counts: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn counts(&self) -> Option<&[f64]> {
        self.counts.as_deref()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.config.centroid_dim as f64 * 2.0 * self.config.length_scale.powi(2))
    }

    /// `exp(−‖W_c f − e_c‖² / (e · 2σ²))`.
    pub fn kernel(&self, features: &DVector<f64>, class: usize) -> Result<f64> {
        check_dim(self.config.feature_dim, features.len(), "duq features")?;
        if class >= self.num_classes() {
            return Err(Error::InvalidConfig(format!("class {class} out of range")));
        }
        let diff = &self.weights[class] * features - &self.centroids[class];
        Ok((-diff.norm_squared() * self.scale()).exp())
    }

    pub fn kernels(&self, features: &DVector<f64>) -> Result<Vec<f64>> {
        (0..self.num_classes())
            .map(|c| self.kernel(features, c))
            .collect()
    }

    pub fn certainty(&self, features: &DVector<f64>) -> Result<f64> {
        Ok(self.kernels(features)?.into_iter().fold(0.0, f64::max))
    }

    /// Class with the largest kernel value; ties go to the lower index.
    pub fn predict(&self, features: &DVector<f64>) -> Result<usize> {
        let k = self.kernels(features)?;
        let mut best = 0;
        for (c, v) in k.iter().enumerate() {
            if *v > k[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// `Σ_c BCE(K_c, y_c)` averaged over the batch.
    pub fn loss(&self, features: &[DVector<f64>], labels: &[usize]) -> Result<DuqLossGrad> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: labels.len(),
                context: "duq batch labels",
            });
        }
        let inv_n = 1.0 / features.len() as f64;
        let scale = self.scale();
        let mut loss = 0.0;
        let mut weight_grads: Vec<DMatrix<f64>> = self
            .weights
            .iter()
            .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
            .collect();
        let mut feature_grads = Vec::with_capacity(features.len());
        for (f, &label) in features.iter().zip(labels) {
            check_dim(self.config.feature_dim, f.len(), "duq features")?;
            let mut gf = DVector::zeros(f.len());
            for c in 0..self.num_classes() {
                let diff = &self.weights[c] * f - &self.centroids[c];
                let k = (-diff.norm_squared() * scale).exp();
                let (l, dl_dk) = bce(k, if c == label { 1.0 } else { 0.0 });
                loss += l * inv_n;
                // dK/d(W f) = −2 · scale · K · diff
                let coeff = dl_dk * k * (-2.0 * scale) * inv_n;
                gf.gemv_tr(coeff, &self.weights[c], &diff, 1.0);
                weight_grads[c].ger(coeff, &diff, f, 1.0);
            }
            feature_grads.push(gf);
        }
        Ok(DuqLossGrad {
            loss,
            features: feature_grads,
            weights: weight_grads,
        })
    }

    /// EMA update `N = γN + (1−γ)n`, `m = γm + (1−γ)Σ W_c f`, `e = m / N`.
    /// The first call starts the accumulators from the batch itself.
    pub fn update_centroids(&mut self, features: &[DVector<f64>], labels: &[usize]) -> Result<()> {
        let k = self.num_classes();
        let mut n = vec![0.0; k];
        let mut m: Vec<DVector<f64>> = vec![DVector::zeros(self.config.centroid_dim); k];
        for (f, &label) in features.iter().zip(labels) {
            if label >= k {
                return Err(Error::InvalidConfig(format!("label {label} out of range")));
            }
            n[label] += 1.0;
            m[label].gemv(1.0, &self.weights[label], f, 1.0);
        }
        let gamma = self.config.ema;
        match &mut self.counts {
            None => {
                for c in 0..k {
                    if n[c] > 0.0 {
                        self.sums[c] = m[c].clone();
                    } else {
                        // keep the initial centroid as a unit-weight prior
                        self.sums[c] = self.centroids[c].clone();
                        n[c] = 1.0;
                    }
                }
                self.counts = Some(n);
            }
            Some(counts) => {
                for c in 0..k {
                    counts[c] = gamma * counts[c] + (1.0 - gamma) * n[c];
                    self.sums[c] = &self.sums[c] * gamma + &m[c] * (1.0 - gamma);
                }
            }
        }
        let counts = self.counts.as_ref().expect("set above");
        for c in 0..k {
            self.centroids[c] = &self.sums[c] / counts[c];
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flat_map(|w| w.as_slice().iter().copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for w in &mut self.weights {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_head(dim: usize, classes: usize) -> DuqHead {
        let mut h = DuqHead::new(DuqHeadConfig::new(classes, dim, dim), 0).unwrap();
        for w in &mut h.weights {
            *w = DMatrix::identity(dim, dim);
        }
        h
    }

    #[test]
    fn kernel_values() {
        let mut h = identity_head(1, 2);
        h.centroids[0] = DVector::from_vec(vec![0.5]);
        assert_eq!(h.kernel(&DVector::from_vec(vec![0.5]), 0).unwrap(), 1.0);
        // squared distance 2σ² with e = 1
        let d = (2.0f64).sqrt() * 0.1;
        assert_relative_eq!(
            h.kernel(&DVector::from_vec(vec![0.5 + d]), 0).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
        let near = h.kernel(&DVector::from_vec(vec![0.6]), 0).unwrap();
        let far = h.kernel(&DVector::from_vec(vec![0.7]), 0).unwrap();
        assert!(far < near && near < 1.0 && far > 0.0);
    }

    #[test]
    fn loss_at_half_kernels() {
        let mut h = identity_head(1, 2);
        // K = 0.5 for both classes: squared distance = ln 2 · 2σ²
        let d = (2f64.ln() * 2.0 * 0.01).sqrt();
        h.centroids[0] = DVector::from_vec(vec![d]);
        h.centroids[1] = DVector::from_vec(vec![-d]);
        let out = h.loss(&[DVector::zeros(1)], &[0]).unwrap();
        assert_relative_eq!(out.loss, 2.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_vanishes_at_perfect_kernels() {
        let mut h = identity_head(2, 2);
        h.centroids[0] = DVector::from_vec(vec![0.0, 0.0]);
        h.centroids[1] = DVector::from_vec(vec![100.0, 100.0]);
        let out = h.loss(&[DVector::zeros(2)], &[0]).unwrap();
        assert!(out.loss < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut h = DuqHead::new(
            DuqHeadConfig {
                length_scale: 0.8,
                ..DuqHeadConfig::new(2, 3, 2)
            },
            5,
        )
        .unwrap();
        h.centroids[1] = DVector::from_vec(vec![0.3, -0.2]);
        let feats = vec![
            DVector::from_vec(vec![0.2, -0.4, 0.1]),
            DVector::from_vec(vec![-0.3, 0.5, 0.2]),
        ];
        let labels = [0, 1];
        let g = h.loss(&feats, &labels).unwrap();
        let eps = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-6);
        for s in 0..2 {
            for i in 0..3 {
                let mut up = feats.clone();
                up[s][i] += eps;
                let mut down = feats.clone();
                down[s][i] -= eps;
                let fd = (h.loss(&up, &labels).unwrap().loss
                    - h.loss(&down, &labels).unwrap().loss)
                    / (2.0 * eps);
                assert!(
                    rel(g.features[s][i], fd) < 1e-5,
                    "{} vs {fd}",
                    g.features[s][i]
                );
            }
        }
        let base = h.params();
        let flat_grad: Vec<f64> = g
            .weights
            .iter()
            .flat_map(|w| w.as_slice().iter().copied())
            .collect();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += eps;
            h.set_params(&p);
            let up = h.loss(&feats, &labels).unwrap().loss;
            p[k] -= 2.0 * eps;
            h.set_params(&p);
            let down = h.loss(&feats, &labels).unwrap().loss;
            h.set_params(&base);
            assert!(rel(flat_grad[k], (up - down) / (2.0 * eps)) < 1e-5);
        }
    }

    #[test]
    fn zero_ema_gives_batch_means() {
        let mut h = identity_head(2, 2);
        h.config.ema = 0.0;
        let f = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![3.0, 2.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        ];
        h.update_centroids(&f, &[0, 0, 1]).unwrap();
        h.update_centroids(&f, &[0, 0, 1]).unwrap();
        assert_relative_eq!(h.centroids[0], DVector::from_vec(vec![2.0, 1.0]));
        assert_relative_eq!(h.centroids[1], DVector::from_vec(vec![-1.0, -1.0]));
    }

    #[test]
    fn empty_class_keeps_its_centroid() {
        let mut h = identity_head(1, 2);
        h.config.ema = 0.9;
        let f = vec![DVector::from_vec(vec![2.0]), DVector::from_vec(vec![4.0])];
        h.update_centroids(&f, &[0, 1]).unwrap();
        let before = h.centroids[1].clone();
        let n_before = h.counts().unwrap()[1];
        h.update_centroids(&f[..1], &[0]).unwrap();
        assert_relative_eq!(h.counts().unwrap()[1], 0.9 * n_before);
        assert_relative_eq!(h.centroids[1], before, epsilon = 1e-12);
    }

    #[test]
    fn slow_ema_converges_to_the_batch_mean() {
        let mut h = identity_head(1, 1);
        h.config.ema = 0.999;
        h.update_centroids(&[DVector::from_vec(vec![10.0])], &[0])
            .unwrap();
        let f = vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![2.0])];
        // after k identical batches: N = 1·γ^k + 2(1 − γ^k), m = 10γ^k + 3(1 − γ^k)
        let k = 20000;
        for _ in 0..k {
            h.update_centroids(&f, &[0, 0]).unwrap();
        }
        let g = 0.999f64.powi(k);
        let expected = (10.0 * g + 3.0 * (1.0 - g)) / (g + 2.0 * (1.0 - g));
        assert_relative_eq!(h.centroids[0][0], expected, epsilon = 1e-9);
        assert!((h.centroids[0][0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn prediction_and_certainty() {
        let mut h = identity_head(1, 2);
        h.centroids[0] = DVector::from_vec(vec![0.0]);
        h.centroids[1] = DVector::from_vec(vec![1.0]);
        let f = DVector::from_vec(vec![0.0]);
        assert_eq!(h.predict(&f).unwrap(), 0);
        assert_eq!(h.certainty(&f).unwrap(), 1.0);
        assert_eq!(h.predict(&DVector::from_vec(vec![0.5])).unwrap(), 0);
        let c = h.certainty(&DVector::from_vec(vec![3.0])).unwrap();
        assert!(c > 0.0 && c < 1.0);
    }
}
