//! Named parameter storage and per-forward binding into the graph.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replace every tensor, keeping names; shapes must match.
    pub fn load(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::invalid(
                "params",
                format!("expected {} tensors, got {}", self.tensors.len(), values.len()),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "params.load",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        self.tensors = values;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Wrap every parameter as a graph leaf for one forward pass.
    pub fn bind(&self, requires_grad: bool) -> Bound<T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| Var::leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Use caller-built graph nodes in place of the stored tensors; shapes
    /// must match.
    pub fn bind_vars(&self, vars: Vec<Var<T>>) -> Result<Bound<T>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::invalid(
                "params",
                format!("expected {} vars, got {}", self.tensors.len(), vars.len()),
            ));
        }
        for (v, t) in vars.iter().zip(&self.tensors) {
            if v.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "params.bind_vars",
                    lhs: t.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        Ok(Bound { vars })
    }
}

/// Parameters bound as leaves of one graph.
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Accumulated gradients, zero where nothing flowed.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
        Tensor::randn(shape, std, rng)
    }

    /// Glorot-scaled normal for a `[fan_in, fan_out]` matrix.
    pub fn glorot<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::randn(&[fan_in, fan_out], std, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::<f32>::new();
        p.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.add("a", Tensor::zeros(&[2])).is_err());
        assert_eq!(p.id("a"), Some(ParamId(0)));
    }

    #[test]
    fn bind_and_grads() {
        let mut p = ParamStore::<f64>::new();
        let a = p.add("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let b = p.add("b", Tensor::zeros(&[3])).unwrap();
        let bound = p.bind(true);
        bound.get(a).sum_sq().unwrap().backward().unwrap();
        let g = bound.grads();
        assert_eq!(g[0].to_f64_vec(), vec![2.0, 4.0]);
        assert_eq!(g[b.0].to_f64_vec(), vec![0.0; 3]);
    }
}
