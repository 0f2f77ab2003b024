//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| {
                    let shape = params.get(&name).shape().to_vec();
                    (Tensor::zeros(shape.clone()), Tensor::zeros(shape))
                });
            let (value, grad) = params.value_and_grad_mut(&name);
            for i in 0..value.len() {
                let g = grad.data()[i];
                let md = &mut m.data_mut()[i];
                *md = self.beta1 * *md + (1.0 - self.beta1) * g;
                let vd = &mut v.data_mut()[i];
                *vd = self.beta2 * *vd + (1.0 - self.beta2) * g * g;
                let m_hat = *md / bc1;
                let v_hat = *vd / bc2;
                let w = &mut value.data_mut()[i];
                *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut params = ParamStore::new();
        params
            .insert("w", Tensor::matrix(1, 3, vec![0.5, -1.25, 0.0]).unwrap())
            .unwrap();
        let before = params.get("w").clone();
        let mut opt = AdamW::new(0.0, 0.01);
        params.accumulate_grad("w", &Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        opt.step(&mut params);
        assert_eq!(
            params.get("w").data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            before.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w - 3)^2 with exact gradients
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.0)).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            params.zero_grads();
            let w = params.get("w").item();
            params.accumulate_grad("w", &Tensor::scalar(2.0 * (w - 3.0)));
            opt.step(&mut params);
        }
        assert!((params.get("w").item() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(0.01, 0.5);
        opt.step(&mut params); // zero gradient, decay only
        let w = params.get("w").item();
        assert!(w < 1.0 && w > 0.99, "decoupled decay: {w}");
    }
}
