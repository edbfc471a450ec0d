//! Adam optimizer over named parameter lists.
//!
//! State is kept per parameter (lazily allocated on first gradient) so a
//! phase that never touches a network leaves both its parameters and its
//! moments untouched, and so the full optimizer state can be checkpointed.

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor};

use crate::nn::ParamEntry;

pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Option<AdamSlot>>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: (0..n_params).map(|_| None).collect(),
        }
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient. Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, params: &[ParamEntry], grads: &GradStore) -> Result<()> {
        assert_eq!(params.len(), self.slots.len());
        for (entry, slot) in params.iter().zip(self.slots.iter_mut()) {
            if !entry.trainable {
                continue;
            }
            let Some(grad) = grads.get(&entry.var) else {
                continue;
            };
            let grad = grad.detach();
            let theta = entry.var.as_tensor().detach();
            let slot = match slot {
                Some(s) => s,
                None => slot.insert(AdamSlot {
                    m: theta.zeros_like()?,
                    v: theta.zeros_like()?,
                    t: 0,
                }),
            };
            slot.t += 1;
            slot.m = ((&slot.m * self.beta1)? + (&grad * (1.0 - self.beta1))?)?;
            slot.v = ((&slot.v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&slot.m / (1.0 - self.beta1.powi(slot.t as i32)))?;
            let v_hat = (&slot.v / (1.0 - self.beta2.powi(slot.t as i32)))?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            entry.var.set(&(theta - update)?)?;
        }
        Ok(())
    }

    pub fn slots(&self) -> &[Option<AdamSlot>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut Vec<Option<AdamSlot>> {
        &mut self.slots
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamList;
    use candle_core::{Device, Var};

    #[test]
    fn step_moves_only_params_with_gradients() {
        let dev = Device::Cpu;
        let a = Var::from_tensor(&Tensor::new(&[1f32, 2.0], &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[3f32], &dev).unwrap()).unwrap();
        let mut list = ParamList::default();
        list.push("t", "a", &a, true);
        list.push("t", "b", &b, true);

        let loss = a.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.1, 2);
        opt.step(&list.entries, &grads).unwrap();

        let a_new = a.as_tensor().to_vec1::<f32>().unwrap();
        assert!(a_new[0] < 1.0 && a_new[1] < 2.0);
        assert_eq!(b.as_tensor().to_vec1::<f32>().unwrap(), vec![3.0]);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With fresh moments the bias-corrected step is exactly lr * sign(g).
        let dev = Device::Cpu;
        let a = Var::from_tensor(&Tensor::new(&[2f32], &dev).unwrap()).unwrap();
        let mut list = ParamList::default();
        list.push("t", "a", &a, true);
        let loss = (a.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.05, 1);
        opt.step(&list.entries, &grads).unwrap();
        let v = a.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((v - (2.0 - 0.05)).abs() < 1e-4);
    }
}
