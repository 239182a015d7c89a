//! SGD and Adam over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step_count: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("optimizer: unknown parameter `{name}`")))?;
            if p.len() != grad.len() {
                return Err(Error::Shape(format!(
                    "optimizer: `{name}` is {:?} but gradient is {:?}",
                    p.shape(),
                    grad.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(grad.data()) {
                        *w -= self.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((w, g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Step schedule: `base` halved every `halve_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub halve_every: usize,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        if self.halve_every == 0 {
            return self.base;
        }
        self.base * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn quadratic_grad(store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, "", true);
        let x = p.var("x").unwrap();
        let loss = g.square(x);
        let grads = g.backward(loss).unwrap();
        p.collect_grads(&g, &grads)
    }

    #[test]
    fn sgd_step_on_square() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        let grads = quadratic_grad(&store);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("x").unwrap().item() - 0.8).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // grad g = 2x = 4 at x = 2. m = 0.1*4 = 0.4, v = 0.001*16 = 0.016,
        // m_hat = 0.4/0.1 = 4, v_hat = 0.016/0.001 = 16,
        // x' = 2 - 0.01 * 4 / (4 + 1e-8).
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(2.0));
        let mut opt = OptimizerState::adam(0.01).unwrap();
        let grads = quadratic_grad(&store);
        opt.step(&mut store, &grads).unwrap();
        let expected = 2.0 - 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((store.get("x").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn halving_schedule() {
        let s = LrSchedule {
            base: 4e-4,
            halve_every: 40,
            epochs: 200,
        };
        assert_eq!(s.at_epoch(0), 4e-4);
        assert_eq!(s.at_epoch(39), 4e-4);
        assert_eq!(s.at_epoch(40), 2e-4);
        assert_eq!(s.at_epoch(199), 4e-4 / 16.0);
    }

    #[test]
    fn rejects_nonpositive_rate() {
        assert!(OptimizerState::sgd(0.0).is_err());
    }
}
