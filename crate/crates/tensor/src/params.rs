use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Names containing this marker hold running statistics, not trainable
/// weights. They are checkpointed but never touched by the optimizer.
pub const BUFFER_MARKER: char = '#';

pub fn is_buffer(name: &str) -> bool {
    name.contains(BUFFER_MARKER)
}

/// Storage precision of a [`ParamStore`].
///
/// Arithmetic is always `f64`. With `F32` every stored value (parameters and
/// moments) is rounded to the nearest `f32` after each write, which makes the
/// `f32` checkpoint format lossless.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    fn round_all(self, v: &mut [f64]) {
        if self == Precision::F32 {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ParamEntry {
    pub(crate) value: Tensor,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

/// Hyperparameters of the AdamW update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters, their AdamW moments and the optimizer step counter.
#[derive(Clone, Debug)]
pub struct ParamStore {
    pub(crate) entries: BTreeMap<String, ParamEntry>,
    pub(crate) step: u64,
    pub(crate) precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            entries: BTreeMap::new(),
            step: 0,
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let value = self.rounded(value.detach());
        let n = value.len();
        self.entries.insert(
            name,
            ParamEntry {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_owned()))
    }

    /// Drop an entry, returning its value.
    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name).map(|e| e.value)
    }

    /// Replace the value of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let precision = self.precision;
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_owned()))?;
        if entry.value.shape() != value.shape() {
            return Err(TensorError::ParamShape {
                name: name.to_owned(),
                expected: entry.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        let mut data = value.to_vec();
        precision.round_all(&mut data);
        entry.value = Tensor::new(value.shape(), data)?;
        Ok(())
    }

    fn rounded(&self, t: Tensor) -> Tensor {
        if self.precision == Precision::F64 {
            return t;
        }
        t.map(|x| self.precision.round(x))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// First and second AdamW moments of a parameter.
    pub fn moments(&self, name: &str) -> Result<(&[f64], &[f64])> {
        self.entries
            .get(name)
            .map(|e| (e.m.as_slice(), e.v.as_slice()))
            .ok_or_else(|| TensorError::UnknownParam(name.to_owned()))
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// Number of trainable scalars whose names start with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix) && !is_buffer(k))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// One AdamW update with decoupled weight decay.
    ///
    /// Parameters absent from `grads` are left untouched; the step counter
    /// advances once per call.
    pub fn adamw_step(&mut self, grads: &BTreeMap<String, Tensor>, opt: &AdamW) -> Result<()> {
        for (name, g) in grads {
            let entry = self
                .entries
                .get(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if entry.value.shape() != g.shape() {
                return Err(TensorError::ParamShape {
                    name: name.clone(),
                    expected: entry.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - opt.beta1.powf(t);
        let bc2 = 1.0 - opt.beta2.powf(t);
        let precision = self.precision;
        for (name, g) in grads {
            if is_buffer(name) {
                continue;
            }
            let entry = self.entries.get_mut(name).expect("checked above");
            let mut p = entry.value.to_vec();
            for (i, &gi) in g.data().iter().enumerate() {
                p[i] -= opt.lr * opt.weight_decay * p[i];
                entry.m[i] = opt.beta1 * entry.m[i] + (1.0 - opt.beta1) * gi;
                entry.v[i] = opt.beta2 * entry.v[i] + (1.0 - opt.beta2) * gi * gi;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                p[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
            precision.round_all(&mut p);
            precision.round_all(&mut entry.m);
            precision.round_all(&mut entry.v);
            entry.value = Tensor::new(entry.value.shape(), p)?;
        }
        Ok(())
    }
}
