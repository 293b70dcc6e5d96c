use indexmap::IndexMap;

use super::graph::{BatchMoments, Gradients};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.numel();
        Param { value, grad: None, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            decay_factor: 0.5,
            decay_every: 15,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay interval must be at least one epoch".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running statistics).
/// Iteration order is insertion order, which fixes the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: IndexMap<String, Param>,
    buffers: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Copies the gradients of every registered parameter out of a reverse sweep.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.params() {
            let p = self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            match p.grad.as_mut() {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g),
            }
        }
        Ok(())
    }

    /// One Adam step with the learning rate scheduled for `epoch` (zero based).
    pub fn adam_update(&mut self, cfg: &AdamConfig, epoch: usize) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        let lr = cfg.lr_at(epoch);
        for p in self.params.values_mut() {
            let grad = p.grad.take().expect("checked above");
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            for (((theta, &g), m), v) in
                p.value.data_mut().iter_mut().zip(grad.data()).zip(&mut p.m).zip(&mut p.v)
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *theta -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }

    /// Folds train-mode batch moments into the running statistics stored under
    /// `{prefix}.running_mean` / `{prefix}.running_var`. The running variance uses the
    /// unbiased estimate.
    pub fn update_running_stats(&mut self, prefix: &str, moments: &BatchMoments) -> Result<()> {
        let unbias = if moments.count > 1 {
            moments.count as f64 / (moments.count - 1) as f64
        } else {
            1.0
        };
        let rm = self.buffer_mut(&format!("{prefix}.running_mean"))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&moments.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = self.buffer_mut(&format!("{prefix}.running_var"))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&moments.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
        Ok(())
    }

    /// `(name, tensor)` for every parameter followed by every buffer.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .map(|(n, p)| (n.as_str(), &p.value))
            .chain(self.buffers.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub(crate) fn set_entry(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = if let Some(p) = self.params.get_mut(name) {
            &mut p.value
        } else if let Some(b) = self.buffers.get_mut(name) {
            b
        } else {
            return Err(Error::CheckpointMismatch(format!("unexpected entry `{name}`")));
        };
        if slot.shape() != value.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}
