use serde::{Deserialize, Serialize};

/// Convex, non-decreasing activation used on the gated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Softplus,
    Relu,
}

impl ActivationKind {
    pub fn value(self, x: f64) -> f64 {
        match self {
            ActivationKind::Softplus => softplus(x),
            ActivationKind::Relu => x.max(0.0),
        }
    }

    /// First derivative. For relu the subgradient 0 is used at the kink.
    pub fn first(self, x: f64) -> f64 {
        match self {
            ActivationKind::Softplus => sigmoid(x),
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Second derivative, `None` for relu.
    pub fn second(self, x: f64) -> Option<f64> {
        match self {
            ActivationKind::Softplus => {
                let s = sigmoid(x);
                Some(s * (1.0 - s))
            }
            ActivationKind::Relu => None,
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, ActivationKind::Softplus)
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function in the symmetric stable form.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
