use super::param::ParamStore;

/// Adam with a constant learning rate. Frozen parameters are skipped
/// entirely, so their bytes never change.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Number of scalar parameters the next step would update.
    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        store.trainable_numel()
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (i, (_, p)) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let n = grad.len();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let lr = self.lr;
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn frozen_param_bits_unchanged() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full([3], 0.7)).unwrap();
        let b = store.add("b", Tensor::full([3], -0.2)).unwrap();
        store.set_frozen("b", true);
        let before = store.get(b).unwrap().tensor.clone();
        let mut opt = Adam::new(0.1);
        for _ in 0..5 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let (va, vb) = (g.param(a).unwrap(), g.param(b).unwrap());
                let p = g.mul(va, vb).unwrap();
                let l = g.sum(p);
                g.backward(l).unwrap();
                g.param_grads()
            };
            store.accumulate_grads(&grads).unwrap();
            opt.step(&mut store);
        }
        assert_eq!(store.get(b).unwrap().tensor.data(), before.data());
        assert_ne!(store.get(a).unwrap().tensor.data(), &[0.7; 3]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::full([2], 3.0)).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let v = g.param(x).unwrap();
                let sq = g.mul(v, v).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap();
                g.param_grads()
            };
            store.accumulate_grads(&grads).unwrap();
            opt.step(&mut store);
        }
        assert!(store.get(x).unwrap().tensor.data().iter().all(|v| v.abs() < 1e-2));
    }
}
