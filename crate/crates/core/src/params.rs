//! Named trainable tensors with gradient accumulators.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::tensor::{read_weights, write_weights, Gradients, Result, Tape, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Ordered parameter collection. Insertion order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, valid for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`; `trainable` decides whether
    /// gradients flow into them.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect();
        Bound { vars }
    }

    /// Sums the gradients found for `bound` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<S>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(S::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let list: Vec<(&str, &Tensor<S>)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        write_weights(w, &list)
    }

    /// Loads values by name. Every parameter must be present with a matching
    /// shape; extra tensors in the file are an error too.
    pub fn load<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let tensors: Vec<(String, Tensor<S>)> = read_weights(r)?;
        if tensors.len() != self.params.len() {
            return Err(TensorError::Format(format!(
                "expected {} tensors, file holds {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = self.id(&name).ok_or_else(|| TensorError::Format(format!("unknown tensor {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(TensorError::Format(format!(
                    "{name}: shape {:?} does not match {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}
