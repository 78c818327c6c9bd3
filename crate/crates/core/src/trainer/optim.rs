use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW state. Moments exist only for parameters that are still trainable.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
    discarded: Vec<bool>,
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig, num_params: usize) -> Self {
        Self {
            cfg,
            step: 0,
            moments: vec![None; num_params],
            discarded: vec![false; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drops moments of parameters that will never train again.
    pub fn discard(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.moments[id.index()] = None;
            self.discarded[id.index()] = true;
        }
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments[id.index()].is_some()
    }

    /// Elements of moment storage currently held.
    pub fn state_elements(&self) -> usize {
        self.moments.iter().flatten().map(|m| m.m.len() * 2).sum()
    }

    /// One decoupled-weight-decay Adam update. `lr_of` gives each
    /// parameter's rate for this step.
    pub fn adamw_step(
        &mut self,
        params: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr_of: impl Fn(ParamId) -> f64,
    ) -> Result<()> {
        for (id, _) in grads {
            if self.discarded[id.index()] {
                return Err(Error::contract(format!(
                    "gradient for frozen parameter `{}`",
                    params.get(*id).name
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, grad) in grads {
            let p = params.get_mut(*id);
            if p.value.shape() != grad.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} for parameter `{}` of shape {:?}",
                    grad.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let lr = lr_of(*id);
            let decay = if p.decay { weight_decay } else { 0.0 };
            let n = grad.numel();
            let mo = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let w = p.value.data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                mo.m[j] = beta1 * mo.m[j] + (1.0 - beta1) * g;
                mo.v[j] = beta2 * mo.v[j] + (1.0 - beta2) * g * g;
                let mhat = mo.m[j] / bc1;
                let vhat = mo.v[j] / bc2;
                w[j] -= lr * (mhat / (vhat.sqrt() + eps) + decay * w[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;

    fn store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::default();
        let id = s.add("w", Tensor::new([1, 1], vec![v]).unwrap(), ParamGroup::Layer(0));
        (s, id)
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let (mut s, id) = store(0.3);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, 1);
        for _ in 0..5 {
            opt.adamw_step(&mut s, &[(id, Tensor::zeros([1, 1]))], |_| 0.1).unwrap();
        }
        assert_eq!(s.get(id).value.data(), &[0.3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, 1);
        opt.adamw_step(&mut s, &[(id, Tensor::ones([1, 1]))], |_| 0.01).unwrap();
        let w = s.get(id).value.data()[0];
        assert!((w + 0.01 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn frozen_gradient_is_contract_violation() {
        let (mut s, id) = store(1.0);
        let mut opt = OptimizerState::new(AdamWConfig::default(), 1);
        opt.adamw_step(&mut s, &[(id, Tensor::ones([1, 1]))], |_| 0.01).unwrap();
        assert!(opt.has_moments(id));
        opt.discard(&[id]);
        assert!(!opt.has_moments(id));
        let err = opt.adamw_step(&mut s, &[(id, Tensor::ones([1, 1]))], |_| 0.01);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
