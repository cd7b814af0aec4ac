//! One config record and one runner per experiment. Every config has
//! serde defaults, so a partial JSON file is enough.

mod moons;
mod probes;
mod regression;

pub use moons::{run_two_moons, MoonsRun, TwoMoonsConfig, TwoMoonsResult};
pub use probes::{
    estimate_outcome, run_estimate, run_gradcheck, run_init_dist, run_lft_bench, EstimateConfig,
    GradcheckConfig, GradcheckResult, GradcheckRow, InitDistConfig, InitDistResult, InitDistRow,
    LftBenchConfig, LftBenchResult, LftBenchRow,
};
pub use regression::{
    run_anneal, run_flexibility, run_summary_sweep, run_tightness, AnnealConfig, AnnealResult,
    AnnealRow, FlexibilityConfig, FlexibilityResult, ModelChoice, SweepConfig, SweepResult,
    SweepRow, TightnessConfig, TightnessResult, TightnessRow, TightnessSummary,
};

/// Seeds `base, base + 1, ..., base + count − 1`.
pub(crate) fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}
