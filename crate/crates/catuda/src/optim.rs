//! Adam, sharpness-aware minimization, and the training-loop schedules.

use crate::error::{CatError, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam state: moment buffers plus the number of applied steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            step_count: 0,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// Bias-corrected Adam update with the L2 term `weight_decay * w` added to the
/// gradient before the moment updates.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.numel() {
        return Err(CatError::Shape {
            op: "adam_step",
            detail: format!(
                "param {}, grad {}, moments {}",
                param.len(),
                grad.len(),
                state.m.numel()
            ),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..param.len() {
        let g = grad[i] + cfg.weight_decay * param[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a [`ParamSet`], lazily creating per-parameter state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            states: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(id.0).and_then(|s| s.as_ref())
    }

    /// Apply one Adam step to each listed parameter using its accumulated
    /// gradient. Parameters not listed keep both value and state untouched.
    pub fn step(&mut self, params: &mut ParamSet, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if self.states.len() <= id.0 {
                self.states.resize(id.0 + 1, None);
            }
            let shape = params.value(id).shape().to_vec();
            let state = self.states[id.0].get_or_insert_with(|| AdamState::new(&shape));
            let p = params.get_mut(id);
            let grad = p.grad.data().to_vec();
            adam_step(p.value.data_mut(), &grad, state, &self.cfg)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamConfig {
    pub rho: f64,
    pub enabled: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            rho: 0.05,
            enabled: false,
        }
    }
}

const SAM_EPS: f64 = 1e-12;

/// Sharpness-aware step:
/// 1. `task_grad` populates gradients of the task loss at the current weights;
/// 2. weights are perturbed by `rho * g / ||g||` along those gradients;
/// 3. `full_grad` populates gradients of the full loss at the perturbed point;
/// 4. weights are restored and `opt` applies the step with those gradients.
///
/// A zero task gradient skips the perturbation and falls back to a plain step.
pub fn sam_step<F1, F2>(
    params: &mut ParamSet,
    ids: &[ParamId],
    opt: &mut Adam,
    cfg: &SamConfig,
    task_grad: F1,
    full_grad: F2,
) -> Result<()>
where
    F1: FnOnce(&mut ParamSet) -> Result<()>,
    F2: FnOnce(&mut ParamSet) -> Result<()>,
{
    params.zero_grads();
    task_grad(params)?;
    let norm_sq: f64 = ids
        .iter()
        .map(|&id| params.get(id).grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();

    let mut saved: Vec<(ParamId, Vec<f64>)> = Vec::new();
    if cfg.enabled && norm > 0.0 {
        let scale = cfg.rho / (norm + SAM_EPS);
        for &id in ids {
            let p = params.get_mut(id);
            saved.push((id, p.value.data().to_vec()));
            let grad = p.grad.data().to_vec();
            for (w, g) in p.value.data_mut().iter_mut().zip(&grad) {
                *w += scale * g;
            }
        }
    }

    params.zero_grads();
    full_grad(params)?;

    for (id, original) in saved {
        params.get_mut(id).value.data_mut().copy_from_slice(&original);
    }
    opt.step(params, ids)
}

/// Step schedule: `base_lr` before the first drop, `/10` after it, `/100`
/// after the second.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, drops: (usize, usize)) -> f64 {
    if epoch >= drops.1 {
        base_lr / 100.0
    } else if epoch >= drops.0 {
        base_lr / 10.0
    } else {
        base_lr
    }
}

/// Adversarial ramp coefficient `2 / (1 + exp(-10 p)) - 1`, monotone from 0
/// toward 1 over p in [0, 1].
pub fn grl_coefficient(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CatError::Param(format!(
            "ramp progress must lie in [0, 1], got {}",
            p
        )));
    }
    Ok(2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_grad_no_decay_leaves_params() {
        let mut w = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(&[3]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut w, &g, &mut st, &cfg).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // With m-hat = g and v-hat = g^2, the first update is -lr*g/(|g|+eps).
        for &g in &[0.3, -1.7, 42.0] {
            let mut w = vec![0.5];
            let mut st = AdamState::new(&[1]);
            let cfg = AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            adam_step(&mut w, &[g], &mut st, &cfg).unwrap();
            let update = w[0] - 0.5;
            assert!(
                (update + cfg.lr * g / (g.abs() + cfg.eps)).abs() < 1e-9,
                "g={} update={}",
                g,
                update
            );
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(w) = w^2, grad 2w; |w| must strictly decrease each of 10 steps.
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut w = vec![1.0f64];
        let mut st = AdamState::new(&[1]);
        let mut prev = w[0].abs();
        for _ in 0..10 {
            let g = vec![2.0 * w[0]];
            adam_step(&mut w, &g, &mut st, &cfg).unwrap();
            assert!(w[0].abs() < prev, "|w| did not decrease: {} -> {}", prev, w[0]);
            prev = w[0].abs();
        }
    }

    #[test]
    fn adam_shape_mismatch_errors() {
        let mut w = vec![0.0; 2];
        let mut st = AdamState::new(&[2]);
        assert!(adam_step(&mut w, &[1.0], &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn lr_schedule_boundaries() {
        assert_eq!(lr_at_epoch(0.001, 0, (150, 250)), 0.001);
        assert_eq!(lr_at_epoch(0.001, 149, (150, 250)), 0.001);
        assert_eq!(lr_at_epoch(0.001, 150, (150, 250)), 0.0001);
        assert_eq!(lr_at_epoch(0.001, 250, (150, 250)), 0.00001);
    }

    #[test]
    fn grl_coefficient_endpoints_and_monotonicity() {
        assert_eq!(grl_coefficient(0.0).unwrap(), 0.0);
        let at_one = grl_coefficient(1.0).unwrap();
        assert!((at_one - (2.0 / (1.0 + (-10.0f64).exp()) - 1.0)).abs() < 1e-15);
        assert!(at_one > 0.99 && at_one < 1.0);
        let (a, b, c) = (
            grl_coefficient(0.2).unwrap(),
            grl_coefficient(0.5).unwrap(),
            grl_coefficient(0.8).unwrap(),
        );
        assert!(a < b && b < c);
        assert!(grl_coefficient(-0.1).is_err());
        assert!(grl_coefficient(1.1).is_err());
    }
}
