//! Adam with a single step-wise learning-rate drop.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply `lr` by 0.1 once `step` exceeds this; 0 disables.
    pub drop_at: usize,
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub const EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, drop_at: usize) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: Self::EPS,
            drop_at,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.drop_at > 0 && self.step > self.drop_at {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    /// Apply one update. `grads[i]` belongs to the `i`-th parameter of the
    /// store; `None` leaves that parameter and its moments untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} gradients for {} parameters ({} moments)",
                grads.len(),
                store.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let lr = self.current_lr();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (param, grad)) in store.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("adam: gradient of {}", param.name)));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &g), m), v) in param.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    #[test]
    fn scalar_recurrence() {
        let mut store = ParamStore::new();
        store.add("x", ParamGroup::Encoder, Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 0);
        adam.update(&mut store, &[Some(Tensor::scalar(0.5))]).unwrap();
        // first step moves by lr * sign(g)
        let x = store.iter().next().unwrap().value.item().unwrap();
        assert!((x - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }
}
