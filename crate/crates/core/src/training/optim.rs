use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer for the network weights (the inner LFT solver is separate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OuterOptimizer {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// Heavy-ball SGD with coupled weight decay.
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OuterOptimizer {
    fn default() -> Self {
        OuterOptimizer::adam(0.01)
    }
}

impl OuterOptimizer {
    pub fn adam(lr: f64) -> Self {
        OuterOptimizer::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OuterOptimizer::Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = match *self {
            OuterOptimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::InvalidConfig(
                        "adam needs betas in [0, 1) and eps > 0".into(),
                    ));
                }
                lr
            }
            OuterOptimizer::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                if !(momentum >= 0.0) || !(weight_decay >= 0.0) {
                    return Err(Error::InvalidConfig(
                        "sgd momentum and weight decay must be >= 0".into(),
                    ));
                }
                lr
            }
        };
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(())
    }
}

/// State of an optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OuterOptimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl OptimizerState {
    pub fn new(kind: OuterOptimizer, n: usize) -> Result<Self> {
        kind.validate()?;
        Ok(OptimizerState {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        })
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len().min(params.len()),
                context: "optimizer step",
            });
        }
        self.t += 1;
        match self.kind {
            OuterOptimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OuterOptimizer::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                for i in 0..params.len() {
                    let g = grad[i] + weight_decay * params[i];
                    self.m[i] = if self.t == 1 {
                        g
                    } else {
                        momentum * self.m[i] + g
                    };
                    params[i] -= lr * self.m[i];
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = OptimizerState::new(OuterOptimizer::adam(0.01), 2).unwrap();
        let mut p = vec![1.0, 1.0];
        s.step(&mut p, &[3.0, -0.5]).unwrap();
        assert_relative_eq!(p[0], 0.99, epsilon = 1e-9);
        assert_relative_eq!(p[1], 1.01, epsilon = 1e-9);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut s = OptimizerState::new(OuterOptimizer::sgd(0.1, 0.9, 0.5), 1).unwrap();
        let mut p = vec![2.0];
        s.step(&mut p, &[1.0]).unwrap();
        // g = 1 + 0.5·2 = 2
        assert_relative_eq!(p[0], 1.8);
        s.step(&mut p, &[1.0]).unwrap();
        // g = 1 + 0.9 = 1.9, buffer = 0.9·2 + 1.9 = 3.7
        assert_relative_eq!(p[0], 1.8 - 0.37);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = OptimizerState::new(OuterOptimizer::adam(0.05), 1).unwrap();
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            s.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(OptimizerState::new(OuterOptimizer::adam(0.0), 1).is_err());
        assert!(OptimizerState::new(OuterOptimizer::sgd(0.1, -1.0, 0.0), 1).is_err());
        let mut s = OptimizerState::new(OuterOptimizer::adam(0.1), 2).unwrap();
        assert!(s.step(&mut [0.0], &[0.0]).is_err());
    }
}
