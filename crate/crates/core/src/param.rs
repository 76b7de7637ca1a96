//! Trainable parameters and the store that owns them.
//!
//! Models hold [`ParamId`] handles into a [`ParamStore`]; the tape reads
//! values through the store during the forward pass and accumulates
//! gradients back into it after `backward`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A value with its gradient accumulator. The two always share a shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) u32);

/// Named parameter arena. Names are unique and stable, which makes them the
/// natural key for checkpoints.
#[derive(Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.params.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.params.push(Param::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0 as usize]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0 as usize]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0 as usize].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0 as usize];
        assert_eq!(p.value.shape(), value.shape(), "set_value shape change");
        p.value = value;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len() as u32).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) {
        let p = &mut self.params[id.0 as usize];
        assert_eq!(p.grad.numel(), grad.len(), "gradient length mismatch");
        for (g, &d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Export all parameters as (name, value) pairs in insertion order.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.params.iter().map(|p| p.value.clone()))
            .collect()
    }

    /// Load values by name. Every blob must match an existing parameter and
    /// every parameter must be covered, so architecture drift is caught here.
    pub fn load(&mut self, blobs: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in blobs {
            let id = self
                .lookup(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint has unknown parameter {name:?}")))?;
            let p = &mut self.params[id.0 as usize];
            if p.value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name:?}: checkpoint shape {:?} vs model {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
            seen[id.0 as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!(
                "checkpoint missing parameter {:?}",
                self.names[missing]
            )));
        }
        Ok(())
    }
}
