//! Adam optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{param_err, Result};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return param_err(format!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return param_err("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Gradients for frozen or unknown tensors are ignored.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return param_err(format!("gradient for {name} has shape {:?}", g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = (*pv as f64 - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new(0);
        s.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap(), true);
        s.insert("frozen", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(), false);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(0.1).unwrap();
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[1]))]);
        for _ in 0..5 {
            opt.step(&mut s, &g).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut s = store();
        let mut opt = Adam::new(0.1).unwrap();
        let g = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap())]);
        opt.step(&mut s, &g).unwrap();
        assert!((s.get("w").unwrap().item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_tensor_unchanged() {
        let mut s = store();
        let mut opt = Adam::new(0.1).unwrap();
        let g = BTreeMap::from([("frozen".to_string(), Tensor::new(vec![2], vec![5.0, 5.0]).unwrap())]);
        opt.step(&mut s, &g).unwrap();
        assert_eq!(s.get("frozen").unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn invalid_learning_rate() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-1.0).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }
}
