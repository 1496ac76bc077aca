use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{GemsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Names are dotted paths (`decoder.block0.ffn.w1`)
/// and double as checkpoint keys.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
    seed: u64,
}

/// Seed for a named parameter: independent of registration order, so adding
/// or removing a submodule never perturbs the initial values of the others.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            ..Default::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(name_seed(self.seed, name))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.by_name.get(&name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Gaussian init with standard deviation `std`, seeded by name.
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let mut rng = self.rng_for(name);
        let t = Tensor::randn(rows, cols, std, &mut rng);
        self.insert(name, t)
    }

    /// Fan-in scaled Gaussian for a `fan_in × fan_out` projection.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        self.normal(name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, value))
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
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| GemsError::Contract(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Parameters in name order (the checkpoint order).
    pub fn iter_sorted(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name
            .iter()
            .map(|(n, id)| (n.as_str(), &self.values[id.0]))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.by_name
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, id)| self.values[id.0].len())
            .sum()
    }

    /// Copies every parameter present in `other` under the same name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter_sorted() {
            let Some(id) = self.id(name) else {
                return Err(GemsError::Contract(format!("unexpected parameter {name}")));
            };
            if self.values[id.0].shape() != t.shape() {
                return Err(GemsError::Dimension {
                    op: "load_from",
                    lhs: self.values[id.0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.values[id.0] = t.clone();
        }
        Ok(())
    }
}
