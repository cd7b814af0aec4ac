//! Non-asymptotic bounds on the conjugate-argmax iterates.

use crate::error::{Error, Result};

fn check_constants(mu: f64, gamma: f64) -> Result<()> {
    if !(mu > 0.0) || !(gamma >= mu) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < mu <= gamma, got mu = {mu}, gamma = {gamma}"
        )));
    }
    Ok(())
}

/// Lipschitz constant `h(t)` of the gradient-descent iterate `x ↦ y_t(x)`
/// under `η_t = 1/(μ(t+1))` and a shared starting point.
///
/// `α_1 = 1`, `α_{t+1} = sqrt(1 − 2η_tμ + η_t²γ²) α_t + η_tμ`, `h(t) = α_t / μ`.
/// `h(0) = 0` since every input starts at the same point.
pub fn gd_lipschitz_bound(t: usize, mu: f64, gamma: f64) -> Result<f64> {
    check_constants(mu, gamma)?;
    Ok(gd_lipschitz_bounds(t, mu, gamma)[t])
}

/// `[h(0), h(1), ..., h(t_max)]` in one pass.
pub fn gd_lipschitz_bounds(t_max: usize, mu: f64, gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t_max + 1);
    out.push(0.0);
    let mut alpha = 1.0;
    for t in 1..=t_max {
        out.push(alpha / mu);
        let eta = 1.0 / (mu * (t as f64 + 1.0));
        let contraction = (1.0 - 2.0 * eta * mu + eta * eta * gamma * gamma)
            .max(0.0)
            .sqrt();
        alpha = contraction * alpha + eta * mu;
    }
    out
}

/// Bi-Lipschitz window of an inexact network whose iterates are within
/// `eps_i`, `eps_j` of the exact argmax, for input pairs at least `delta`
/// apart: `(α − (ε_i+ε_j)/δ, α + β + (ε_i+ε_j)/δ)`.
pub fn rough_bilip_bounds(
    alpha: f64,
    beta: f64,
    eps_i: f64,
    eps_j: f64,
    delta: f64,
) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let slack = (eps_i + eps_j) / delta;
    Ok((alpha - slack, alpha + beta + slack))
}

/// Error bound `(1 − μ²/γ²)^{t/2} · init_gap` of gradient descent with step
/// `1/γ` on a smooth objective.
pub fn gd_error_bound_smooth(t: usize, mu: f64, gamma: f64, init_gap: f64) -> Result<f64> {
    check_constants(mu, gamma)?;
    if t == 0 {
        return Ok(init_gap);
    }
    let base = (1.0 - (mu * mu) / (gamma * gamma)).max(0.0);
    Ok(base.powf(t as f64 / 2.0) * init_gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_iterate_has_constant_one_over_mu() {
        assert_relative_eq!(gd_lipschitz_bound(1, 0.25, 3.0).unwrap(), 4.0);
    }

    #[test]
    fn hand_iterated_second_step() {
        // η_1 = 1/2, sqrt(1 − 1 + 1/4) = 1/2, α_2 = 1/2 + 1/2
        assert_relative_eq!(
            gd_lipschitz_bound(2, 1.0, 1.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn bound_tends_to_inverse_mu() {
        let h = gd_lipschitz_bound(100_000, 1.0, 2.0).unwrap();
        assert!((h - 1.0).abs() < 0.01, "h = {h}");
    }

    #[test]
    fn rejects_mu_above_gamma() {
        assert!(gd_lipschitz_bound(3, 2.0, 1.0).is_err());
        assert!(gd_error_bound_smooth(3, 2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn rough_bounds() {
        assert_eq!(
            rough_bilip_bounds(2.0, 3.0, 0.0, 0.0, 0.5).unwrap(),
            (2.0, 5.0)
        );
        let (lo, hi) = rough_bilip_bounds(4.0, 1.0, 0.1, 0.1, 1.0).unwrap();
        assert_relative_eq!(lo, 3.8, epsilon = 1e-15);
        assert_relative_eq!(hi, 5.2, epsilon = 1e-15);
        let (lo2, hi2) = rough_bilip_bounds(4.0, 1.0, 0.1, 0.1, 0.5).unwrap();
        assert!(lo2 < lo && hi2 > hi);
        assert!(rough_bilip_bounds(1.0, 1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn smooth_error_bound() {
        assert_eq!(gd_error_bound_smooth(0, 1.0, 2.0, 3.0).unwrap(), 3.0);
        assert_eq!(gd_error_bound_smooth(4, 1.0, 1.0, 3.0).unwrap(), 0.0);
        assert_relative_eq!(
            gd_error_bound_smooth(2, 1.0, 2.0, 1.0).unwrap(),
            0.75,
            epsilon = 1e-15
        );
    }
}
