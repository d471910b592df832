//! Adam with bias correction and a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::Real;
use crate::{Error, Result};

/// Adam hyperparameters. Defaults are the universal ones: betas 0.9/0.999,
/// eps 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    pub step: u64,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    /// Zero moments sized to match `param_lens`, one entry per parameter
    /// tensor in registration order.
    pub fn new(param_lens: &[usize]) -> Self {
        Self {
            step: 0,
            first_moment: param_lens.iter().map(|&n| vec![F::zero(); n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }
}

/// One bias-corrected Adam update over a list of named parameter tensors.
///
/// `params` and `grads` are aligned with the moment buffers in `state`;
/// a zero gradient leaves the parameter unchanged (and still advances the
/// step counter). A non-finite gradient aborts with the parameter's name.
pub fn adam_step<F: Real>(
    params: &mut [(&str, &mut [F])],
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    hp: &AdamParams,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first_moment.len());
    state.step += 1;
    let t = state.step as i32;
    let beta1 = F::from_f64(hp.beta1);
    let beta2 = F::from_f64(hp.beta2);
    let eps = F::from_f64(hp.eps);
    let one = F::one();
    // Fold both bias corrections into the step size.
    let lr_t = F::from_f64(
        hp.lr * (1.0 - hp.beta2.powi(t)).sqrt() / (1.0 - hp.beta1.powi(t)),
    );
    for (((name, p), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        debug_assert_eq!(p.len(), g.len());
        for i in 0..p.len() {
            let gi = g[i];
            if !gi.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter `{name}` at element {i}"
                )));
            }
            m[i] = beta1 * m[i] + (one - beta1) * gi;
            v[i] = beta2 * v[i] + (one - beta2) * gi * gi;
            p[i] = p[i] - lr_t * m[i] / (v[i].sqrt() + eps);
        }
    }
    Ok(())
}

/// Step-decay schedule: the effective rate at epoch `e` is
/// `initial_lr * decay_factor^(number of milestones <= e)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, milestones: Vec<usize>, decay_factor: f64) -> Result<Self> {
        if initial_lr < 0.0 || !initial_lr.is_finite() {
            return Err(Error::Config(format!("initial_lr must be non-negative, got {initial_lr}")));
        }
        if !(0.0..1.0).contains(&decay_factor) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0,1), got {decay_factor}"
            )));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones must be strictly ascending: {milestones:?}")));
        }
        Ok(Self {
            initial_lr,
            milestones,
            decay_factor,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial_lr * self.decay_factor.powi(hits as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut w = vec![1.0f64, -2.0, 3.5];
        let grads = vec![vec![0.0; 3]];
        let mut state = AdamState::new(&[3]);
        adam_step(&mut [("w", &mut w)], &grads, &mut state, &AdamParams::new(1e-3)).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 3.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With eps << |g|, the bias-corrected first step is -lr * sign(g).
        let mut w = vec![0.0f64, 0.0];
        let grads = vec![vec![3.0, -0.25]];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [("w", &mut w)], &grads, &mut state, &AdamParams::new(0.01)).unwrap();
        assert!(approx(w[0], -0.01, 1e-6), "w[0] = {}", w[0]);
        assert!(approx(w[1], 0.01, 1e-6), "w[1] = {}", w[1]);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2 from w = 0 at lr 0.1: within 0.1 of the optimum
        // after 100 steps.
        let mut w = vec![0.0f64];
        let mut state = AdamState::new(&[1]);
        let hp = AdamParams::new(0.1);
        for _ in 0..100 {
            let grads = vec![vec![2.0 * (w[0] - 3.0)]];
            adam_step(&mut [("w", &mut w)], &grads, &mut state, &hp).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.1, "w = {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut w = vec![0.0f64];
        let grads = vec![vec![f64::NAN]];
        let mut state = AdamState::new(&[1]);
        let err = adam_step(&mut [("conv1.kernel", &mut w)], &grads, &mut state, &AdamParams::new(0.1))
            .unwrap_err();
        assert!(err.to_string().contains("conv1.kernel"), "{err}");
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::new(1e-4, vec![30, 60, 90], 0.1).unwrap();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(29), 1e-4);
        assert!(approx(s.lr_at(30), 1e-5, 1e-12));
        assert!(approx(s.lr_at(59), 1e-5, 1e-12));
        assert!(approx(s.lr_at(60), 1e-6, 1e-12));
        assert!(approx(s.lr_at(99), 1e-7, 1e-12));
        // Non-increasing step function.
        for e in 1..100 {
            assert!(s.lr_at(e) <= s.lr_at(e - 1));
        }
    }

    #[test]
    fn schedule_rejects_bad_config() {
        assert!(LrSchedule::new(1e-4, vec![30, 30], 0.1).is_err());
        assert!(LrSchedule::new(1e-4, vec![], 1.0).is_err());
        assert!(LrSchedule::new(f64::NAN, vec![], 0.1).is_err());
    }
}
