use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{config_err, Result};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered weight store. A model holds `ParamId`s into one store; siamese
/// branches reuse the same ids, so there is exactly one copy of every weight.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_fan_in(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> ParamId {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::uniform(shape.to_vec(), bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
        }
    }

    /// Replaces every value from a flat buffer laid out in store order.
    pub fn load_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(config_err!("checkpoint has {} values, model expects {}", values.len(), self.num_values()));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn flat_values(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }
}
