use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relaxes the imposed Lipschitz bound whenever the model's empirical
/// constant gets close to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub bound: f64,
    /// Epochs between checks.
    pub check_period: usize,
    pub closeness: f64,
    pub growth: f64,
}

impl AnnealState {
    pub fn new(bound: f64) -> Result<Self> {
        let s = AnnealState {
            bound,
            check_period: 5,
            closeness: 0.05,
            growth: 1.5,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0)
            || !(self.growth > 1.0)
            || self.check_period == 0
            || !(self.closeness >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "annealing needs bound > 0, growth > 1, closeness >= 0 and a nonzero check period"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Whether `epoch` (1-based) is a check epoch.
    pub fn is_check(&self, epoch: usize) -> bool {
        epoch > 0 && epoch.is_multiple_of(self.check_period)
    }
}

/// One check: grows the bound when `|lip_hat − bound| ≤ closeness`.
pub fn anneal_step(state: AnnealState, lip_hat: f64) -> AnnealState {
    if (lip_hat - state.bound).abs() <= state.closeness {
        AnnealState {
            bound: state.bound * state.growth,
            ..state
        }
    } else {
        state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grows_only_when_close() {
        let s = AnnealState::new(2.0).unwrap();
        assert_relative_eq!(anneal_step(s, 1.98).bound, 3.0);
        assert_eq!(anneal_step(s, 1.5).bound, 2.0);
        let twice = anneal_step(anneal_step(s, 2.0), 3.0);
        assert_relative_eq!(twice.bound, 4.5);
    }

    #[test]
    fn check_schedule_and_validation() {
        let s = AnnealState::new(2.0).unwrap();
        assert!(!s.is_check(0) && !s.is_check(4) && s.is_check(5) && s.is_check(10));
        assert!(AnnealState::new(0.0).is_err());
        let bad = AnnealState { growth: 1.0, ..s };
        assert!(bad.validate().is_err());
    }
}
