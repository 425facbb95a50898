//! Named parameter arrays shared by all model modules.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Ordered map of parameter name to array. Ordering is lexicographic, which
/// keeps checkpoints, EMA updates and optimizer sweeps deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    entries: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Copy every entry whose name starts with `prefix` from `other`.
    pub fn adopt_group(&mut self, other: &ParamSet<T>, prefix: &str) {
        for (name, value) in &other.entries {
            if name.starts_with(prefix) {
                self.entries.insert(name.clone(), value.clone());
            }
        }
    }

    /// Structural equality of names and shapes (not values).
    pub fn same_structure(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((n1, a1), (n2, a2))| n1 == n2 && a1.shape() == a2.shape())
    }
}

/// Deep copy of a parameter set; mutating the copy leaves the source intact.
pub fn clone_parameters<T: Scalar>(src: &ParamSet<T>) -> ParamSet<T> {
    src.clone()
}

/// Truncated normal initializer (resampled beyond two standard deviations).
pub fn trunc_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(T::from_f64(v));
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches")
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::ones(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clone_is_deep() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.insert("w", trunc_normal(&mut rng, &[2, 3], 0.02));
        let mut copy = clone_parameters(&ps);
        assert_eq!(ps, copy);
        copy.get_mut("w").mapv_inplace(|x| x + 1.0);
        assert_ne!(ps.get("w"), copy.get("w"));
        let again = clone_parameters(&copy);
        assert_eq!(again, copy);
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: ArrayD<f32> = trunc_normal(&mut rng, &[100, 10], 0.02);
        assert!(a.iter().all(|x| x.abs() <= 0.04 + f32::EPSILON));
    }
}
