use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backward::Gradients;
use crate::error::{invalid, Result, TensorError};
use crate::shape::numel;
use crate::tensor::Tensor;

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

/// How [`ParamStore::bind`] exposes parameters to a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tracking {
    /// Track gradients unless the store is frozen.
    Auto,
    /// Constants: no gradient can reach the store.
    Constant,
    /// Always tracked, even when frozen. Used to audit that no gradient
    /// arrives at frozen parameters.
    Audit,
}

/// An ordered collection of named parameters with deterministic
/// initialization and a frozen flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
    frozen: bool,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
            frozen: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Uniform `U(-1/√fan_in, 1/√fan_in)` initialization drawn from a stream
    /// keyed by the store seed and the parameter name, so the values do not
    /// depend on registration order.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let data = (0..numel(shape)).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, shape, vec![value; numel(shape)])
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if data.len() != numel(shape) {
            return Err(invalid(
                "ParamStore::insert",
                format!("`{name}`: {} values for shape {shape:?}", data.len()),
            ));
        }
        if self.params.contains_key(name) {
            return Err(invalid("ParamStore::insert", format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data: Arc::new(data),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Mutable access to a parameter's values (copy-on-write).
    pub fn values_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        self.params
            .get_mut(name)
            .map(|p| Arc::make_mut(&mut p.data))
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    /// Exposes every parameter as a tensor leaf for one forward pass.
    pub fn bind(&self, tracking: Tracking) -> Vars {
        let tracked = match tracking {
            Tracking::Auto => !self.frozen,
            Tracking::Constant => false,
            Tracking::Audit => true,
        };
        let map = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = Tensor::from_shared(Arc::clone(&p.data), &p.shape, tracked)
                    .expect("parameter shape is validated on insert");
                (name.clone(), t)
            })
            .collect();
        Vars { map, tracked }
    }

    /// Flattens every parameter into one vector in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.values().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(invalid(
                "ParamStore::unflatten",
                format!("{} values for {} scalars", values.len(), self.num_scalars()),
            ));
        }
        let mut offset = 0;
        for p in self.params.values_mut() {
            let n = p.data.len();
            p.data = Arc::new(values[offset..offset + n].to_vec());
            offset += n;
        }
        Ok(())
    }
}

/// Parameters bound as tensors for a forward pass.
#[derive(Clone)]
pub struct Vars {
    map: HashMap<String, Tensor>,
    tracked: bool,
}

impl Vars {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    /// Per-parameter gradients out of a backward sweep. Parameters the loss
    /// does not reach are reported as zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .map(|(name, t)| {
                let g = grads
                    .get(t)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.clone(), g)
            })
            .collect()
    }

    /// Names of bound parameters that received a gradient entry at all.
    pub fn reached_by(&self, grads: &Gradients) -> Vec<String> {
        let mut names: Vec<String> = self
            .map
            .iter()
            .filter(|(_, t)| grads.get(t).is_some())
            .map(|(n, _)| n.clone())
            .collect();
        names.sort();
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(7);
        a.init_uniform("x", &[3], 3).unwrap();
        a.init_uniform("y", &[2], 2).unwrap();
        let mut b = ParamStore::new(7);
        b.init_uniform("y", &[2], 2).unwrap();
        b.init_uniform("x", &[3], 3).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.get("x").unwrap().data.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn frozen_store_binds_constants() {
        let mut s = ParamStore::new(1);
        s.init_const("w", &[2], 1.0).unwrap();
        assert!(s.bind(Tracking::Auto).get("w").unwrap().requires_grad());
        s.set_frozen(true);
        assert!(!s.bind(Tracking::Auto).get("w").unwrap().requires_grad());
        assert!(s.bind(Tracking::Audit).get("w").unwrap().requires_grad());
    }

    #[test]
    fn flatten_roundtrip() {
        let mut s = ParamStore::new(3);
        s.init_uniform("a", &[2, 2], 4).unwrap();
        s.init_uniform("b", &[3], 1).unwrap();
        let flat = s.flatten();
        let mut t = s.clone();
        t.unflatten(&vec![0.0; flat.len()]).unwrap();
        t.unflatten(&flat).unwrap();
        assert_eq!(s, t);
    }
}
