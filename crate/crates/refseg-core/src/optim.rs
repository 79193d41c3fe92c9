//! Decoupled-weight-decay adaptive optimizer with polynomial learning-rate
//! decay.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::params::ParamStore;

/// AdamW with a polynomial schedule `lr_t = lr0 * (1 - t/T)^power`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub total_steps: usize,
    pub step: usize,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, poly_power: f64, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            poly_power,
            total_steps: total_steps.max(1),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Current learning rate under the polynomial schedule.
    pub fn current_lr(&self) -> f64 {
        let t = (self.step as f64 / self.total_steps as f64).min(1.0);
        self.lr * (1.0 - t).powf(self.poly_power)
    }

    /// Apply one update. `grads` maps parameter names to gradients; store
    /// entries without a gradient are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        let lr_t = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    // decoupled weight decay
                    *p -= lr_t * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }

    /// Optimizer moments for checkpointing, keyed by parameter name.
    pub fn state(&self) -> (&BTreeMap<String, ArrayD<f64>>, &BTreeMap<String, ArrayD<f64>>) {
        (&self.m, &self.v)
    }

    pub fn restore_state(
        &mut self,
        m: BTreeMap<String, ArrayD<f64>>,
        v: BTreeMap<String, ArrayD<f64>>,
        step: usize,
    ) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2 elementwise
        let mut store = ParamStore::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[2]), 0.0));
        let mut opt = AdamW::new(0.1, 0.0, 0.0, 1000);
        for _ in 0..500 {
            let x = store.get("x");
            let grad = x.mapv(|v| 2.0 * (v - 3.0));
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), grad);
            opt.apply(&mut store, &grads);
        }
        for &v in store.get("x").iter() {
            assert!((v - 3.0).abs() < 1e-2, "got {v}");
        }
    }

    #[test]
    fn polynomial_schedule_decays_to_zero() {
        let mut opt = AdamW::new(1.0, 0.0, 0.9, 10);
        assert!((opt.current_lr() - 1.0).abs() < 1e-12);
        opt.step = 5;
        let mid = opt.current_lr();
        assert!(mid < 1.0 && mid > 0.0);
        opt.step = 10;
        assert_eq!(opt.current_lr(), 0.0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient, nonzero decay: parameter shrinks toward zero
        let mut store = ParamStore::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = AdamW::new(0.1, 0.5, 0.0, 100);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), ArrayD::zeros(IxDyn(&[1])));
        opt.apply(&mut store, &grads);
        let v = store.get("x")[IxDyn(&[0])];
        assert!((v - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }
}
