/// Flat view of a parameter structure, used by the outer optimizers and by
/// finite-difference checks.
pub trait Parameters {
    fn num_params(&self) -> usize;
    fn to_flat(&self) -> Vec<f64>;
    fn set_flat(&mut self, flat: &[f64]);
    /// `true` for entries that must stay nonnegative.
    fn nonneg_mask(&self) -> Vec<bool>;
}
