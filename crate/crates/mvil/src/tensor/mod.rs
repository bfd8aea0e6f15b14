//! Dense tensors, the parameter store, the autodiff tape, and AdamW.

pub mod kernels;
pub mod optim;
pub mod tape;

pub use optim::{AdamW, AdamWParams};
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// Dense row-major f64 tensor with an optional gradient accumulator.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_values(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Adds `delta` into the gradient accumulator, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Identifier of a parameter inside a [`ParamStore`].
pub type ParamId = usize;

/// Named parameter tensors in a fixed registration order.
///
/// Registration order is the canonical order for initialization,
/// checkpoints, and optimizer state.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: std::collections::HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push((name, tensor));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].1
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Resets every gradient accumulator to zeros.
    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            match &mut t.grad {
                Some(g) => g.fill(0.0),
                None => t.grad = Some(vec![0.0; t.values.len()]),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::from_values(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_values(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn store_rejects_duplicates() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.add("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(vec![3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 4.0, 6.0]);
    }
}
