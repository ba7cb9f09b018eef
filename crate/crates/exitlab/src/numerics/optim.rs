//! Adam and AdamW with per-parameter moment buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::store::ParameterStore;
use crate::numerics::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Adam with L2 regularization folded into the gradient.
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adam,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative and finite, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {beta}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Optimizer state bound to one parameter store layout.
pub struct Optimizer<E> {
    cfg: OptimizerConfig,
    step_count: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Element> Optimizer<E> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the store's accumulated gradients, then bumps
    /// the store version. Gradients are left untouched; callers zero them.
    pub fn step(&mut self, store: &mut ParameterStore<E>) -> Result<()> {
        if self.m.is_empty() {
            self.m = store
                .ids()
                .map(|id| {
                    let (r, c) = store.value(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(Error::Internal(format!(
                "optimizer state holds {} tensors but store has {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.cfg.learning_rate;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);

        for id in store.ids().collect::<Vec<_>>() {
            if !store.grad(id).all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for parameter {:?}",
                    store.name(id)
                )));
            }
            let idx = id.0;
            let coupled_decay = match self.cfg.algorithm {
                Algorithm::Adam => self.cfg.weight_decay,
                Algorithm::AdamW => 0.0,
            };
            let decoupled_decay = match self.cfg.algorithm {
                Algorithm::Adam => 0.0,
                Algorithm::AdamW => self.cfg.weight_decay,
            };
            let n = store.value(id).len();
            for i in 0..n {
                let p = store.value(id).data()[i].to_f64();
                let mut g = store.grad(id).data()[i].to_f64();
                g += coupled_decay * p;
                let m = b1 * self.m[idx].data()[i].to_f64() + (1.0 - b1) * g;
                let v = b2 * self.v[idx].data()[i].to_f64() + (1.0 - b2) * g * g;
                self.m[idx].data_mut()[i] = E::from_f64(m);
                self.v[idx].data_mut()[i] = E::from_f64(v);
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                let update = m_hat / (v_hat.sqrt() + self.cfg.epsilon) + decoupled_decay * p;
                let next = p - lr * update;
                if !next.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite value for parameter {:?} after update",
                        store.name(id)
                    )));
                }
                store.value_mut(id).data_mut()[i] = E::from_f64(next);
            }
        }
        store.bump_version();
        Ok(())
    }
}

/// One optimizer update over all registered parameters.
pub fn optimizer_step<E: Element>(
    optimizer: &mut Optimizer<E>,
    store: &mut ParameterStore<E>,
) -> Result<()> {
    optimizer.step(store)
}
