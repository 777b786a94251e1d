use std::collections::HashMap;

use crate::error::{Result, XaneError};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Named, shaped parameter arrays with gradient buffers. Entry order is
/// insertion order and fixes the serialization and update order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(XaneError::InvalidArgument(format!(
                "duplicate parameter name {}",
                name
            )));
        }
        let id = self.values.len();
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn grad(&self, id: usize) -> &Tensor {
        &self.grads[id]
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.grads[id]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Insert every parameter into a fresh tape as a grad-requiring leaf,
    /// returning vars aligned with parameter ids.
    pub fn inject(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.values
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect()
    }

    /// Accumulate gradients from a completed backward pass. Runs in fixed
    /// parameter order; gradients add across calls until zeroed.
    pub fn accumulate(&mut self, tape: &Tape, vars: &[Var], loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?;
        for (id, &v) in vars.iter().enumerate() {
            if let Some(g) = grads.get(v) {
                for (a, b) in self.grads[id].data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}
