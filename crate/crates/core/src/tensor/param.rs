//! Named parameters and gradient accumulation.

use std::collections::BTreeMap;

use super::{Gradients, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    /// Dotted path such as `graph.layer0.update_w`.
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name `{name}`")));
        }
        let i = self.params.len();
        self.index.insert(name.clone(), i);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Replaces the values of parameter `i`, keeping its shape.
    pub fn set(&mut self, i: usize, tensor: Tensor) -> Result<()> {
        let p = &mut self.params[i];
        if p.tensor.shape() != tensor.shape() {
            return Err(TensorError::Shape {
                op: "set_param",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every parameter on `tape`, in index order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, &p.tensor))
            .collect()
    }
}

/// Per-parameter gradient buffers, indexed like the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    /// Adds `weight ×` the parameter gradients of one backward sweep.
    pub fn accumulate(&mut self, grads: &Gradients, weight: f64) -> Result<()> {
        for (&i, g) in grads.params() {
            let buf = self
                .grads
                .get_mut(i)
                .ok_or_else(|| TensorError::Contract(format!("gradient for unknown parameter {i}")))?;
            if buf.len() != g.numel() {
                return Err(TensorError::Contract(format!(
                    "gradient of parameter {i} has {} values, expected {}",
                    g.numel(),
                    buf.len()
                )));
            }
            for (b, v) in buf.iter_mut().zip(g.data()) {
                *b += weight * v;
            }
        }
        Ok(())
    }

    /// Adds another accumulator of the same layout.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.grads[i]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}
