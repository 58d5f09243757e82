use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate parameter name {name}"));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Weight matrix with entries drawn from N(0, 1/fan_in).
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::randn(&[fan_in, fan_out], std, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites every parameter from `(name, tensor)` pairs. Names and
    /// shapes must match the store exactly.
    pub fn assign<'a>(&mut self, arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in arrays {
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            if self.values[i].shape() != t.shape() {
                return shape_err(format!(
                    "{name}: stored {:?}, got {:?}",
                    self.values[i].shape(),
                    t.shape()
                ));
            }
            self.values[i] = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return invalid(format!("missing parameter {}", self.names[i]));
        }
        Ok(())
    }

    /// Every parameter rounded through `f32`.
    pub fn round_f32(&mut self) {
        for v in &mut self.values {
            *v = v.round_f32();
        }
    }
}
