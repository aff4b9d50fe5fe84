use std::collections::BTreeMap;

use crate::graph::Tensor;
use crate::params::{ParamId, ParamStore};

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// they survive a checkpoint round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let name = store.name(*id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (lr, eps) = (self.lr, self.eps);
            let p = store.get_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }

    /// `(step, [(name, first moment, second moment)])` in name order.
    pub fn state(&self) -> (u64, Vec<(&str, &Tensor, &Tensor)>) {
        (
            self.step,
            self.moments.iter().map(|(k, (m, v))| (k.as_str(), m, v)).collect(),
        )
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(String, Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn first_step_moves_each_entry_by_lr_against_its_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.insert("w", arr1(&[1.0, 1.0, 1.0]).into_dyn());
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        adam.step(&mut store, &[(id, arr1(&[2.0, -0.5, 0.0]).into_dyn())]);
        let w = store.get(id);
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::new();
        let id = store.insert("w", arr1(&[1.0]).into_dyn());
        store.set_frozen(id, true);
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        adam.step(&mut store, &[(id, arr1(&[1.0]).into_dyn())]);
        assert_eq!(store.get(id)[0], 1.0);
        assert!(adam.state().1.is_empty());
    }

    #[test]
    fn restored_state_continues_identically() {
        let grad = |k: f64| arr1(&[k, -k]).into_dyn();
        let mut store = ParamStore::new();
        let id = store.insert("w", arr1(&[0.0, 0.0]).into_dyn());
        let mut a = Adam::new(0.01, 0.5, 0.9);
        a.step(&mut store, &[(id, grad(1.0))]);
        let (step, moments) = a.state();
        let moments = moments
            .into_iter()
            .map(|(n, m, v)| (n.to_string(), m.clone(), v.clone()))
            .collect();
        let mut b = Adam::new(0.01, 0.5, 0.9);
        b.restore(step, moments);
        let mut other = store.clone();
        a.step(&mut store, &[(id, grad(3.0))]);
        b.step(&mut other, &[(id, grad(3.0))]);
        assert_eq!(store.get(id), other.get(id));
        assert_eq!(a, b);
    }
}
