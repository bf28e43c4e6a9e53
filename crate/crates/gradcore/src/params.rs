use crate::tensor::Tensor;
use crate::{GradError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named trainable tensors with gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.id(name).is_some() {
            return Err(GradError::DuplicateParam(name.to_string()));
        }
        let shape = value.shape().to_vec();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in &mut self.entries {
                e.grad.scale_assign(s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update using the accumulated gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let (p, g, m, v) = (
                e.value.data_mut(),
                e.grad.data(),
                e.m.data_mut(),
                e.v.data_mut(),
            );
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }

    /// Parameters (and optionally optimizer state) as named tensors for checkpointing.
    pub fn to_named(&self, with_optimizer: bool) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        if with_optimizer {
            for e in &self.entries {
                out.push((format!("adam.m/{}", e.name), e.m.clone()));
                out.push((format!("adam.v/{}", e.name), e.v.clone()));
            }
            out.push(("adam.steps".into(), Tensor::scalar(self.steps as f64)));
        }
        out
    }

    /// Overwrites values (and optimizer state when present) from named tensors.
    /// Every parameter of the store must be present with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let find = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        for e in &mut self.entries {
            let t = find(&e.name).ok_or_else(|| GradError::UnknownParam(e.name.clone()))?;
            if t.shape() != e.value.shape() {
                return Err(GradError::ShapeMismatch(format!(
                    "checkpoint `{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
            if let (Some(m), Some(v)) = (
                find(&format!("adam.m/{}", e.name)),
                find(&format!("adam.v/{}", e.name)),
            ) {
                e.m = m.clone();
                e.v = v.clone();
            }
            e.grad.data_mut().fill(0.0);
        }
        if let Some(s) = find("adam.steps") {
            self.steps = s.item() as u64;
        }
        Ok(())
    }
}
