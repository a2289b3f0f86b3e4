//! Adam over the trainable entries of a parameter store.

use crate::error::{arg_err, Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(arg_err!("learning rate must be positive, got {lr}"));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients, which are then cleared.
    /// Trainable parameters without a gradient are left unchanged.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            for p in store.iter_mut() {
                self.m.push(vec![0.0; p.tensor.len()]);
                self.v.push(vec![0.0; p.tensor.len()]);
            }
        }
        if self.m.len() != store.len() {
            return Err(Error::State("parameter store changed size under the optimizer".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable() {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        store.tensor_mut(id).accumulate_grad(&[0.5, -3.0]).unwrap();
        let mut adam = Adam::new(0.1).unwrap();
        adam.step(&mut store).unwrap();
        let w = store.tensor(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert!(store.tensor(id).grad().is_none());
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::new();
        let id = store.add_buffer("b", Tensor::vector(vec![1.0])).unwrap();
        let mut adam = Adam::new(0.1).unwrap();
        adam.step(&mut store).unwrap();
        assert_eq!(store.tensor(id).data(), [1.0]);
    }
}
