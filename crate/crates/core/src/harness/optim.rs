//! Adam with bias correction.

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of the listed parameters. Moments are kept in f64.
    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(*id).value.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                m.resize(p.len(), 0.0);
                v.resize(p.len(), 0.0);
            }
            for j in 0..p.len() {
                let gj = g[j].f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] = T::of(p[j].f64() - lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first step is lr·g/|g|
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64([2], &[1.0, -1.0]).unwrap(), true);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.update(&mut store, &[(id, vec![0.5, -2.0])], 0.1);
        let w = store.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64([1], &[3.0]).unwrap(), true);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let w = store.get(id).value.data()[0];
            adam.update(&mut store, &[(id, vec![2.0 * w])], 0.01);
        }
        assert!(store.get(id).value.data()[0].abs() < 1e-2);
    }
}
