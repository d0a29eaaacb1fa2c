use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut count = 0;
        for (n, v) in self.names.iter().zip(&mut self.values) {
            if n.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|e| *e = S::zero());
                count += 1;
            }
        }
        count
    }

    /// Places every parameter on `graph` as a gradient-carrying leaf.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| graph.param(v.clone())).collect(),
        }
    }

    /// Places every parameter on `graph` as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph<S>) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| graph.constant(v.clone()))
                .collect(),
        }
    }

    /// Wraps externally created leaves, one per parameter in order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.values.len() {
            return Err(Error::contract(format!(
                "expected {} parameter vars, got {}",
                self.values.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            vars: vars.to_vec(),
        })
    }
}

/// Parameters of a [`ParamSet`] placed on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Initializer: weights `U(-sqrt(1/d_in), +sqrt(1/d_in))`, biases zero,
/// norm gains one.
pub struct ParamInit<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn weight<S: Scalar>(&mut self, d_in: usize, d_out: usize) -> Tensor<S> {
        let bound = (1.0 / d_in as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| S::of(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::from_parts(vec![d_in, d_out], data)
    }

    pub fn bias<S: Scalar>(&mut self, d: usize) -> Tensor<S> {
        Tensor::zeros(&[d])
    }

    pub fn gain<S: Scalar>(&mut self, d: usize) -> Tensor<S> {
        Tensor::ones(&[d])
    }
}
