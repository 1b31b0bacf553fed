//! Named, seeded model parameters and their gradient buffers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// A seeded PRNG for one named purpose. Every stream of the same seed is
/// independent of every other, so adding a consumer never perturbs the
/// draws seen by existing ones.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids for the crate's randomness consumers.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SYNTHETIC: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SPLIT: u64 = 4;
}

/// Owns every parameter of a model. Names are unique.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: rng_stream(seed, streams::INIT),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name `{name}`");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Glorot-uniform weight: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::new(shape, data).expect("shape/len agree"))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::ones(shape))
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn snapshot(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                tensor: p.value.clone(),
            })
            .collect()
    }

    /// Overwrites parameter values from a snapshot. Every parameter must be
    /// present with a matching shape.
    pub fn load(&mut self, snapshot: &[NamedTensor]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for nt in snapshot {
            let id = self
                .id(&nt.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", nt.name)))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != nt.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, checkpoint {:?}",
                    nt.name,
                    p.value.shape(),
                    nt.tensor.shape()
                )));
            }
            p.value = nt.tensor.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}
