use std::f64::consts::PI;

use crate::error::{NtaaError, Result};

use super::{Element, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over `total_steps`.
    Cosine {
        total_steps: usize,
    },
}

/// SGD with momentum and decoupled weight decay.
///
/// `v <- m v + g`, then `p <- p - lr (v + wd p)` where the decay term only
/// applies to decayable kinds (conv kernels and head weights).
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(base_lr: f64, momentum: f64, weight_decay: f64, schedule: Schedule) -> Result<Self> {
        if weight_decay < 0.0 {
            return Err(NtaaError::config(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(NtaaError::config(format!(
                "learning rate must be finite and >= 0, got {base_lr}"
            )));
        }
        Ok(SgdState { base_lr, momentum, weight_decay, schedule, velocity: Vec::new() })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::Cosine { total_steps } => {
                if total_steps == 0 {
                    return self.base_lr;
                }
                let t = step.min(total_steps) as f64 / total_steps as f64;
                self.base_lr * (1.0 + (PI * t).cos()) / 2.0
            }
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, step: usize) -> Result<()> {
        let lr = T::c(self.lr_at(step));
        let m = T::c(self.momentum);
        let wd = T::c(self.weight_decay);
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
        for id in ids {
            let decay = store.param(id).kind.decayable();
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
            let v = self.velocity[id.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
            if v.len() != g.len() || t.numel() != g.len() {
                return Err(NtaaError::shape(format!(
                    "optimizer state for parameter {} has {} entries, gradient {}",
                    id.0,
                    v.len(),
                    g.len()
                )));
            }
            for ((p, vi), &gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = m * *vi + gi;
                let d = if decay { *vi + wd * *p } else { *vi };
                *p = *p - lr * d;
            }
        }
        Ok(())
    }

    /// Velocity buffers in parameter order (absent buffers are empty).
    pub fn velocities(&self) -> impl Iterator<Item = &[T]> {
        self.velocity.iter().map(|v| v.as_deref().unwrap_or(&[]))
    }

    pub fn set_velocity(&mut self, index: usize, values: Vec<T>) {
        if self.velocity.len() <= index {
            self.velocity.resize(index + 1, None);
        }
        self.velocity[index] = (!values.is_empty()).then_some(values);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamKind, Tensor};

    fn store_with(kind: ParamKind, value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", kind, Tensor::full(&[3], value)).unwrap();
        s.get_mut(id).accumulate_grad(&[grad; 3]).unwrap();
        s
    }

    #[test]
    fn plain_step_subtracts_lr_times_grad() {
        let mut s = store_with(ParamKind::ConvWeight, 1.0, 1.0);
        let mut opt = SgdState::new(0.1, 0.0, 0.0, Schedule::Constant).unwrap();
        opt.step(&mut s, 0).unwrap();
        for &v in s.get(crate::tensor::ParamId(0)).data() {
            assert!((v - 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_halfway_is_half_base() {
        let opt =
            SgdState::<f64>::new(0.2, 0.9, 0.0, Schedule::Cosine { total_steps: 100 }).unwrap();
        assert!((opt.lr_at(50) - 0.1).abs() < 1e-15);
        assert!((opt.lr_at(0) - 0.2).abs() < 1e-15);
        assert!(opt.lr_at(100).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_by_closed_form_factor() {
        let mut s = store_with(ParamKind::ConvWeight, 2.0, 0.0);
        let mut opt = SgdState::new(0.1, 0.9, 0.01, Schedule::Constant).unwrap();
        opt.step(&mut s, 0).unwrap();
        let expect = 2.0 * (1.0 - 0.1 * 0.01);
        for &v in s.get(crate::tensor::ParamId(0)).data() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn arch_logits_are_never_decayed() {
        let mut s = store_with(ParamKind::Arch, 2.0, 0.0);
        let mut opt = SgdState::new(0.1, 0.9, 0.5, Schedule::Constant).unwrap();
        opt.step(&mut s, 0).unwrap();
        assert_eq!(s.get(crate::tensor::ParamId(0)).data(), &[2.0; 3]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = store_with(ParamKind::ConvWeight, 1.5, 3.0);
        let before = s.get(crate::tensor::ParamId(0)).clone();
        let mut opt = SgdState::new(0.0, 0.9, 1e-4, Schedule::Constant).unwrap();
        opt.step(&mut s, 0).unwrap();
        assert!(s.get(crate::tensor::ParamId(0)).bitwise_eq(&before));
    }

    #[test]
    fn negative_decay_rejected() {
        assert!(SgdState::<f64>::new(0.1, 0.0, -1.0, Schedule::Constant).is_err());
    }
}
