//! Adam with bias-corrected moments and per-epoch exponential decay.

use serde::{Deserialize, Serialize};

use crate::error::{MeimError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update of every tensor in `params` with the matching gradient.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(MeimError::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for (name, n) in [("gradients", grads.len()), ("moments", state.m.len())] {
        if n != params.len() {
            return Err(MeimError::dim(name, params.len(), n));
        }
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(MeimError::Validation(format!(
                "parameter {i} has shape {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(MeimError::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(MeimError::Config(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

/// `base_lr * decay^epoch`.
pub fn lr_at(schedule: &LrSchedule, epoch: u64) -> f64 {
    schedule.base_lr * schedule.decay.powf(epoch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(x: &mut Tensor, g: f64, state: &mut AdamState, lr: f64) {
        adam_step(&mut [x], &[Tensor::vector(vec![g])], state, lr).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut x = Tensor::vector(vec![1.5, -2.0]);
        let mut s = AdamState::new([&x]);
        adam_step(&mut [&mut x], &[Tensor::zeros(&[2])], &mut s, 0.1).unwrap();
        assert_eq!(x.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = Tensor::vector(vec![1.0]);
        let mut s = AdamState::new([&x]);
        step_scalar(&mut x, 0.5, &mut s, 0.1);
        // m_hat = 0.5, v_hat = 0.25
        let want = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert_eq!(x.data()[0], want);
        assert!((x.data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn equal_gradients_update_identically() {
        let mut a = Tensor::vector(vec![0.3]);
        let mut b = Tensor::vector(vec![0.3]);
        let mut s = AdamState::new([&a, &b]);
        for _ in 0..5 {
            let g = [Tensor::vector(vec![0.7]), Tensor::vector(vec![0.7])];
            adam_step(&mut [&mut a, &mut b], &g, &mut s, 0.01).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn duplicated_gradient_matches_separate_runs() {
        let mut joint = [Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![3.0])];
        let mut alone = Tensor::vector(vec![3.0]);
        let mut sj = AdamState::new(joint.iter());
        let mut sa = AdamState::new([&alone]);
        for t in 0..4 {
            let g = t as f64 - 1.5;
            let grads = [Tensor::vector(vec![g, -g]), Tensor::vector(vec![g])];
            let [p0, p1] = &mut joint;
            adam_step(&mut [p0, p1], &grads, &mut sj, 0.05).unwrap();
            step_scalar(&mut alone, g, &mut sa, 0.05);
        }
        assert_eq!(joint[1], alone);
    }

    #[test]
    fn converges_on_parabola() {
        let mut x = Tensor::vector(vec![5.0]);
        let mut s = AdamState::new([&x]);
        for _ in 0..2000 {
            let g = 2.0 * x.data()[0];
            step_scalar(&mut x, g, &mut s, 0.05);
        }
        assert!(x.data()[0].abs() < 1e-2, "x = {}", x.data()[0]);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut x = Tensor::vector(vec![2.0, -1.0]);
            let mut s = AdamState::new([&x]);
            for i in 0..50 {
                let g =
                    Tensor::vector(x.data().iter().map(|v| v.sin() + i as f64 * 1e-3).collect());
                adam_step(&mut [&mut x], &[g], &mut s, 0.02).unwrap();
            }
            x
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn shape_and_lr_errors() {
        let mut x = Tensor::vector(vec![1.0]);
        let mut s = AdamState::new([&x]);
        assert!(adam_step(&mut [&mut x], &[Tensor::zeros(&[2])], &mut s, 0.1).is_err());
        assert!(adam_step(&mut [&mut x], &[], &mut s, 0.1).is_err());
        assert!(adam_step(&mut [&mut x], &[Tensor::zeros(&[1])], &mut s, 0.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule {
            base_lr: 3e-3,
            decay: 0.995,
        };
        assert_eq!(lr_at(&s, 0), 3e-3);
        // quoted to six significant figures
        assert!((lr_at(&s, 2) - 2.97007e-3).abs() / 2.97007e-3 < 5e-6);
        assert!((lr_at(&s, 2) - 3e-3 * 0.995 * 0.995).abs() < 1e-18);
        let flat = LrSchedule { decay: 1.0, ..s };
        assert_eq!(lr_at(&flat, 500), 3e-3);
        assert!(LrSchedule { decay: 0.0, ..s }.validate().is_err());
        assert!(s.validate().is_ok());
    }
}
