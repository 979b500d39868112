//! Named trainable tensors with per-group learning-rate tags.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Which learning rate a parameter receives during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub group: ParamGroup,
    /// Whether weight decay applies (off for biases and normalization gains).
    pub decay: bool,
}

/// All trainable tensors of a model, addressed by id or name.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        value: Array2<f64>,
        group: ParamGroup,
        decay: bool,
    ) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        let grad = Array2::zeros(value.raw_dim());
        self.params.push(Parameter { name: name.to_string(), value, grad, group, decay });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Glorot-uniform linear weight of shape (fan_in, fan_out), applied as x @ W.
    pub fn add_linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
        self.add(name, value, group, true)
    }

    /// Zero bias row of shape (1, dim).
    pub fn add_bias(&mut self, name: &str, dim: usize, group: ParamGroup) -> ParamId {
        self.add(name, Array2::zeros((1, dim)), group, false)
    }

    /// Embedding table of shape (rows, dim), normal(0, 0.02) entries.
    pub fn add_embedding(
        &mut self,
        name: &str,
        rows: usize,
        dim: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let value = Array2::from_shape_fn((rows, dim), |_| normal_sample(rng) * 0.02);
        self.add(name, value, group, true)
    }

    /// Constant row, e.g. a layer-norm gain initialized to ones.
    pub fn add_const_row(
        &mut self,
        name: &str,
        dim: usize,
        fill: f64,
        group: ParamGroup,
    ) -> ParamId {
        self.add(name, Array2::from_elem((1, dim), fill), group, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        let id = self
            .index
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        Ok(&self.params[id.0])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Array2<f64>) {
        self.params[id.0].grad += grad;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }
}

/// Standard normal via Box-Muller, driven by the model RNG.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
