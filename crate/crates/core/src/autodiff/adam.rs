use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classical L2 decay, folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam state for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    slots: Vec<Moments>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let slots = params
            .into_iter()
            .map(|p| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
                t: 0,
            })
            .collect();
        AdamState { config, slots }
    }

    /// Step counter of parameter `i`.
    pub fn steps(&self, i: usize) -> u64 {
        self.slots[i].t
    }

    /// Updates `params` in place. A `None` gradient leaves that parameter and
    /// its moments untouched, weight decay included.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        let cfg = self.config;
        if cfg.lr <= 0.0 || cfg.lr.is_nan() {
            return Err(Error::InvalidLearningRate(cfg.lr));
        }
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} slots, {} params, {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let Some(grad) = grad else { continue };
            if grad.shape() != param.shape() || slot.m.len() != param.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            slot.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i] + cfg.weight_decay * data[i];
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Single-parameter convenience wrapper around [`AdamState::step`].
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    state.step(&mut [param], &[Some(grad)])
}
