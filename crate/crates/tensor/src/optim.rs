//! Adam optimiser over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::array::Array;
use crate::nn::ParamStore;

/// Adam with bias correction.
///
/// Moment estimates are keyed by parameter name so the state can be saved and
/// restored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Array>,
    second: BTreeMap<String, Array>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else {
                panic!("gradient for unknown parameter {name:?}");
            };
            assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as a flat store (`m.<name>`, `v.<name>`), for checkpoints.
    pub fn state(&self) -> ParamStore {
        self.first
            .iter()
            .map(|(k, v)| (format!("m.{k}"), v.clone()))
            .chain(self.second.iter().map(|(k, v)| (format!("v.{k}"), v.clone())))
            .collect()
    }

    /// Rebuilds an optimiser from [`Adam::state`] output.
    pub fn from_state(lr: f64, step: u64, state: &ParamStore) -> Self {
        let mut adam = Self::new(lr);
        adam.step = step;
        for (k, v) in state.iter() {
            if let Some(name) = k.strip_prefix("m.") {
                adam.first.insert(name.to_owned(), v.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                adam.second.insert(name.to_owned(), v.clone());
            }
        }
        adam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("p", Array::new([2], vec![1.0, -1.0]));
        let grads = BTreeMap::from([("p".to_owned(), Array::new([2], vec![0.3, -5.0]))]);
        let mut adam = Adam::new(0.1);
        adam.update(&mut store, &grads);
        let p = store.get("p").unwrap().data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("p", Array::new([1], vec![0.5]));
        let before = store.clone();
        let grads = BTreeMap::from([("p".to_owned(), Array::new([1], vec![2.0]))]);
        let mut adam = Adam::new(0.0);
        adam.update(&mut store, &grads);
        assert_eq!(store, before);
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::new();
        store.insert("a.w", Array::new([1], vec![0.5]));
        let grads = BTreeMap::from([("a.w".to_owned(), Array::new([1], vec![2.0]))]);
        let mut adam = Adam::new(0.01);
        adam.update(&mut store, &grads);
        let restored = Adam::from_state(0.01, adam.step, &adam.state());
        assert_eq!(restored, adam);
    }
}
