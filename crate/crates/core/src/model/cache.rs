use std::collections::HashMap;
use std::sync::RwLock;

use nalgebra::DVector;

/// Radius within which a previously solved input counts as the same point.
pub const POINT_MATCH_RADIUS: f64 = 1e-6;

/// How a forward call identifies its sample in a [`WarmCache`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKey {
    /// Position in a fixed dataset.
    Index(usize),
    /// No identity: match on the nearest stored input within
    /// [`POINT_MATCH_RADIUS`].
    Point,
}

/// Last converged argmax per sample, used as the next starting point.
///
/// Lookups take a shared lock, inserts an exclusive one.
#[derive(Debug, Default)]
pub struct WarmCache {
    by_index: RwLock<HashMap<usize, DVector<f64>>>,
    by_point: RwLock<Vec<(DVector<f64>, DVector<f64>)>>,
}

impl WarmCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, key: SampleKey, x: &DVector<f64>) -> Option<DVector<f64>> {
        match key {
            SampleKey::Index(i) => self.by_index.read().unwrap().get(&i).cloned(),
            SampleKey::Point => {
                let points = self.by_point.read().unwrap();
                points
                    .iter()
                    .filter(|(p, _)| p.len() == x.len())
                    .map(|(p, y)| ((p - x).norm(), y))
                    .filter(|(dist, _)| *dist <= POINT_MATCH_RADIUS)
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, y)| y.clone())
            }
        }
    }

    /// Stores `y` for the sample. Non-finite vectors are ignored.
    pub fn insert(&self, key: SampleKey, x: &DVector<f64>, y: &DVector<f64>) {
        if y.iter().any(|v| !v.is_finite()) {
            return;
        }
        match key {
            SampleKey::Index(i) => {
                self.by_index.write().unwrap().insert(i, y.clone());
            }
            SampleKey::Point => {
                let mut points = self.by_point.write().unwrap();
                match points
                    .iter_mut()
                    .find(|(p, _)| p.len() == x.len() && (p - x).norm() <= POINT_MATCH_RADIUS)
                {
                    Some(entry) => entry.1 = y.clone(),
                    None => points.push((x.clone(), y.clone())),
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.by_index.read().unwrap().len() + self.by_point.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.by_index.write().unwrap().clear();
        self.by_point.write().unwrap().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_lookup_uses_radius() {
        let c = WarmCache::new();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        c.insert(SampleKey::Point, &x, &DVector::from_vec(vec![5.0, 6.0]));
        let near = DVector::from_vec(vec![1.0 + 5e-7, 2.0]);
        let far = DVector::from_vec(vec![1.0 + 5e-6, 2.0]);
        assert!(c.lookup(SampleKey::Point, &near).is_some());
        assert!(c.lookup(SampleKey::Point, &far).is_none());
        assert!(c.lookup(SampleKey::Index(0), &x).is_none());
    }

    #[test]
    fn ignores_non_finite_entries() {
        let c = WarmCache::new();
        let x = DVector::zeros(1);
        c.insert(SampleKey::Index(0), &x, &DVector::from_element(1, f64::NAN));
        assert!(c.is_empty());
    }

    #[test]
    fn concurrent_inserts() {
        use rayon::prelude::*;
        let c = WarmCache::new();
        (0..200usize).into_par_iter().for_each(|i| {
            let x = DVector::from_element(1, i as f64);
            c.insert(SampleKey::Index(i), &x, &x);
            assert!(c.lookup(SampleKey::Index(i), &x).is_some());
        });
        assert_eq!(c.len(), 200);
    }
}
