//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter, then zeroes all gradient slots.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let param = store.get(id);
            if !param.trainable {
                continue;
            }
            let i = id.index();
            if self.first[i].shape() != param.value.shape() {
                return Err(Error::dim("adam_step", self.first[i].shape(), param.value.shape()));
            }
            let grad = param.grad.data().to_vec();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let mut update = vec![0.0; grad.len()];
            for k in 0..grad.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
                let m_hat = m[k] / correct1;
                let v_hat = v[k] / correct2;
                update[k] = learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            for (x, u) in store.value_mut(id).data_mut().iter_mut().zip(update) {
                *x -= u;
            }
        }
        store.zero_grads();
        Ok(())
    }
}
