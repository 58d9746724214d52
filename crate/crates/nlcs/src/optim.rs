//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

struct Slot<E: Element> {
    name: String,
    param: Tensor<E>,
    first_moment: Vec<E>,
    second_moment: Vec<E>,
}

/// Owns per-parameter moment buffers; parameters are shared handles into the
/// model.
pub struct Adam<E: Element = f32> {
    config: AdamConfig,
    step_count: u64,
    slots: Vec<Slot<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(params: Vec<(String, Tensor<E>)>, config: AdamConfig) -> Adam<E> {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let n = param.numel();
                Slot {
                    name,
                    param,
                    first_moment: vec![E::zero(); n],
                    second_moment: vec![E::zero(); n],
                }
            })
            .collect();
        Adam {
            config,
            step_count: 0,
            slots,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter that received a gradient. If any
    /// gradient is non-finite the whole step is rejected and no parameter is
    /// touched.
    pub fn step(&mut self) -> Result<()> {
        for slot in &self.slots {
            if let Some(g) = slot.param.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter '{}'",
                        slot.name
                    )));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let (b1, b2) = (E::from_f64_lossy(c.beta1), E::from_f64_lossy(c.beta2));
        let lr = E::from_f64_lossy(c.learning_rate);
        let eps = E::from_f64_lossy(c.epsilon);
        let wd = E::from_f64_lossy(c.weight_decay);
        let bc1 = E::one() - E::from_f64_lossy(c.beta1.powi(t));
        let bc2 = E::one() - E::from_f64_lossy(c.beta2.powi(t));
        let one = E::one();
        for slot in &mut self.slots {
            let Some(g) = slot.param.grad() else { continue };
            let mut p = slot.param.to_vec();
            for i in 0..p.len() {
                let gi = g[i];
                slot.first_moment[i] = b1 * slot.first_moment[i] + (one - b1) * gi;
                slot.second_moment[i] = b2 * slot.second_moment[i] + (one - b2) * gi * gi;
                let m_hat = slot.first_moment[i] / bc1;
                let v_hat = slot.second_moment[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
                // decoupled weight decay
                p[i] = p[i] - lr * wd * p[i];
            }
            slot.param.set_data(&p)?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }

    /// Moment buffers and step count for checkpointing.
    pub fn state(&self) -> (u64, Vec<(String, Vec<E>, Vec<E>)>) {
        let buffers = self
            .slots
            .iter()
            .map(|s| (s.name.clone(), s.first_moment.clone(), s.second_moment.clone()))
            .collect();
        (self.step_count, buffers)
    }

    pub fn restore_state(
        &mut self,
        step_count: u64,
        buffers: &[(String, Vec<E>, Vec<E>)],
    ) -> Result<()> {
        self.step_count = step_count;
        for (name, m, v) in buffers {
            let slot = self
                .slots
                .iter_mut()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown optimizer slot '{}'", name)))?;
            if m.len() != slot.first_moment.len() || v.len() != slot.second_moment.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer slot '{}' has mismatched size",
                    name
                )));
            }
            slot.first_moment.copy_from_slice(m);
            slot.second_moment.copy_from_slice(v);
        }
        Ok(())
    }
}
