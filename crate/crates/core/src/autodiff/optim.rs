use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Bound, Graph, Tensor, TensorError};

/// Named parameter tensors that share one learning rate and one Adam state.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    name: String,
    learning_rate: f64,
    tensors: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamGroup {
    /// A zero learning rate is accepted: it turns the group into a no-op
    /// under [`adam_step`] while still tracking gradients.
    pub fn new(name: impl Into<String>, learning_rate: f64) -> Result<Self, TensorError> {
        let name = name.into();
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(TensorError::Contract(format!(
                "group `{name}`: learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        Ok(Self {
            name,
            learning_rate,
            tensors: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<(), TensorError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(TensorError::Contract(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        self.learning_rate = lr;
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.moments.remove(&name);
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.step
    }

    /// Drops optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.moments.clear();
        self.step = 0;
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients a backward pass left on the bound leaves.
    pub fn accumulate_from(&mut self, graph: &Graph, bound: &Bound) -> Result<(), TensorError> {
        for (name, t) in self.tensors.iter_mut() {
            let v = bound.get(name)?;
            if let Some(g) = graph.grad(v) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Little-endian bytes of every parameter, in name order.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 8);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// One bias-corrected Adam update. Gradients are left in place.
pub fn adam_step(group: &mut ParamGroup, beta1: f64, beta2: f64, eps: f64) -> Result<(), TensorError> {
    for (name, t) in &group.tensors {
        if t.grad().is_none() {
            return Err(TensorError::Contract(format!(
                "adam_step on group `{}`: parameter `{}` has no gradient",
                group.name, name
            )));
        }
    }
    group.step += 1;
    let t_step = group.step as i32;
    let bc1 = 1.0 - beta1.powi(t_step);
    let bc2 = 1.0 - beta2.powi(t_step);
    let lr = group.learning_rate;
    for (name, t) in group.tensors.iter_mut() {
        let n = t.numel();
        let (m, v) = group
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = t.grad().expect("checked above").to_vec();
        let data = t.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

impl ParamGroup {
    pub fn adam(&mut self, cfg: &AdamConfig) -> Result<(), TensorError> {
        adam_step(self, cfg.beta1, cfg.beta2, cfg.eps)
    }
}
