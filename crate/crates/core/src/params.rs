//! Named storage for trainable weights and non-trainable buffers.
//!
//! Layers hold [`ParamId`] handles into a [`ParamStore`]; the store owns the
//! tensors, their gradient buffers, and a per-step record of which leading
//! block of each parameter received gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{check_prefix, for_each_prefix_run, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    /// Leading block that received gradient since the last `zero_grad`.
    touched: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            touched: None,
        });
        Ok(ParamId(id))
    }

    /// Registers a trainable tensor.
    pub fn add_param(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor.with_grad())
    }

    /// Registers a non-trainable buffer (running statistics).
    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn touched(&self, id: ParamId) -> Option<&[usize]> {
        self.entries[id.0].touched.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
            e.touched = None;
        }
    }

    /// Adds `grad` (shaped `extents`) into the leading block of parameter `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, extents: &[usize], grad: &[T]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        check_prefix(entry.tensor.shape(), extents)?;
        let shape = entry.tensor.shape().to_vec();
        let Some(buf) = entry.tensor.grad_mut() else {
            return Err(Error::Contract(format!(
                "'{}' does not require grad",
                entry.name
            )));
        };
        let mut src = 0;
        for_each_prefix_run(&shape, extents, |start, len| {
            for (dst, &g) in buf[start..start + len].iter_mut().zip(&grad[src..src + len]) {
                *dst += g;
            }
            src += len;
        });
        entry.touched = Some(match entry.touched.take() {
            None => extents.to_vec(),
            Some(prev) => prev.iter().zip(extents).map(|(&a, &b)| a.max(b)).collect(),
        });
        Ok(())
    }

    /// Overwrites the leading block `extents` of a buffer or parameter.
    pub fn write_prefix(&mut self, id: ParamId, extents: &[usize], values: &[T]) -> Result<()> {
        let tensor = &mut self.entries[id.0].tensor;
        check_prefix(tensor.shape(), extents)?;
        let shape = tensor.shape().to_vec();
        let data = tensor.data_mut();
        let mut src = 0;
        for_each_prefix_run(&shape, extents, |start, len| {
            data[start..start + len].copy_from_slice(&values[src..src + len]);
            src += len;
        });
        Ok(())
    }

    /// Replaces a tensor's values, keeping its gradient state.
    pub fn set_values(&mut self, id: ParamId, values: &Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.tensor.shape() != values.shape() {
            return Err(Error::shape(
                format!("set '{}'", entry.name),
                entry.tensor.shape(),
                values.shape(),
            ));
        }
        entry.tensor.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    touched: e.touched.clone(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Squared L2 norm of all gradient buffers.
    pub fn grad_norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    /// Bitwise comparison of every tensor's values.
    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_grad_accumulates_into_leading_block_only() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add_param("w", Tensor::zeros(&[3, 3]).unwrap())
            .unwrap();
        store.accumulate_grad(id, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        store.accumulate_grad(id, &[1, 3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(
            store.get(id).grad().unwrap(),
            &[2.0, 3.0, 1.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(store.touched(id), Some(&[2usize, 3][..]));
        store.zero_grad();
        assert!(store.get(id).grad().unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(store.touched(id), None);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add_buffer("a", Tensor::zeros(&[1]).unwrap()).unwrap();
        assert!(store.add_buffer("a", Tensor::zeros(&[1]).unwrap()).is_err());
    }
}
