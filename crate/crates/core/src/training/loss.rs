use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

/// Probabilities are clamped into `[CLAMP, 1 − CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `Σ (a − b)²`, no ½ factor.
    #[default]
    Mse,
    /// `Σ −[b ln a + (1 − b) ln(1 − a)]` with `a` a probability.
    Bce,
}

/// Loss of one prediction and its gradient with respect to the prediction.
pub fn loss_and_grad(
    kind: LossKind,
    pred: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_dim(target.len(), pred.len(), "loss prediction")?;
    match kind {
        LossKind::Mse => {
            let diff = pred - target;
            Ok((diff.norm_squared(), diff * 2.0))
        }
        LossKind::Bce => {
            let mut value = 0.0;
            let grad = DVector::from_fn(pred.len(), |i, _| {
                let (l, g) = bce(pred[i], target[i]);
                value += l;
                g
            });
            Ok((value, grad))
        }
    }
}

/// Binary cross entropy of one probability and its derivative. The
/// derivative is zero where the clamp is active.
pub fn bce(p: f64, y: f64) -> (f64, f64) {
    let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let value = -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
    let grad = if q == p {
        -y / q + (1.0 - y) / (1.0 - q)
    } else {
        0.0
    };
    (value, grad)
}
