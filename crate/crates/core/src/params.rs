//! Named, shape-checked learnable parameters with gradient slots.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Every learnable tensor of a model, in registration order.
///
/// Initial values are drawn from a ChaCha stream seeded by `rng_seed`, so two
/// stores built with the same seed and registration order are identical.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a `rows x cols` parameter drawn from U(-1/√fan, 1/√fan).
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, fan: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
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

    /// Overwrites a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::dim("set_value", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.grad.shape() != grad.shape() {
            return Err(Error::dim("accumulate_grad", slot.grad.shape(), grad.shape()));
        }
        slot.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = false;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// `(name, ‖value‖, ‖grad‖)` for every parameter; used in divergence dumps.
    pub fn norms(&self) -> Vec<(String, f64, f64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.norm(), p.grad.norm()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_grads_match_shapes() {
        let mut store = ParameterStore::new(7);
        let id = store.insert_uniform("w", 3, 4, 4).unwrap();
        assert_eq!(store.grad(id).shape(), &[3, 4]);
        assert!(matches!(
            store.insert_uniform("w", 1, 1, 1),
            Err(Error::DuplicateParameter(_))
        ));
        assert!(store.value(id).data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn same_seed_same_values() {
        let mut a = ParameterStore::new(3);
        let mut b = ParameterStore::new(3);
        let ia = a.insert_uniform("x", 4, 4, 4).unwrap();
        let ib = b.insert_uniform("x", 4, 4, 4).unwrap();
        assert_eq!(a.value(ia), b.value(ib));
    }

    #[test]
    fn accumulate_checks_shape() {
        let mut s = ParameterStore::new(0);
        let id = s.insert("p", Tensor::zeros(&[1, 2])).unwrap();
        assert!(s.accumulate_grad(id, &Tensor::zeros(&[2, 1])).is_err());
        s.accumulate_grad(id, &Tensor::row(&[1.0, 2.0])).unwrap();
        s.accumulate_grad(id, &Tensor::row(&[1.0, 2.0])).unwrap();
        assert_eq!(s.grad(id).data(), &[2.0, 4.0]);
        s.zero_grads();
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
    }
}
