//! Flat registry of learnable parameters and non-learnable buffers.
//!
//! Layers hold [`ParamId`]/[`BufferId`] handles instead of tensors, so the
//! optimizer, the checkpoint writer and backward all see the same ordered list.

use crate::error::{Error, Result};
use crate::tensor::{Element, ShapeDisplay, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Named<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Registry<T> {
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
}

impl<T: Element> Registry<T> {
    pub fn new() -> Self {
        Registry {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    /// Same names and shapes with every value converted to `U`.
    pub fn cast<U: Element>(&self) -> Registry<U> {
        let convert = |list: &[Named<T>]| {
            list.iter()
                .map(|n| Named {
                    name: n.name.clone(),
                    tensor: n.tensor.cast(),
                })
                .collect()
        };
        Registry {
            params: convert(&self.params),
            buffers: convert(&self.buffers),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Named {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> BufferId {
        self.buffers.push(Named {
            name: name.into(),
            tensor,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].tensor
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Total number of scalar learnable values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|p| p.name == name).map(BufferId)
    }

    /// Overwrites a parameter or buffer by name, keeping its shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = if let Some(id) = self.find_param(name) {
            &mut self.params[id.0].tensor
        } else if let Some(id) = self.find_buffer(name) {
            &mut self.buffers[id.0].tensor
        } else {
            return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
        };
        if slot.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape [{}], expected [{}]",
                ShapeDisplay(tensor.shape()),
                ShapeDisplay(slot.shape())
            )));
        }
        *slot = tensor;
        Ok(())
    }
}

/// One gradient tensor per registered parameter, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Grads<T> {
    pub fn zeros_for(reg: &Registry<T>) -> Self {
        Grads {
            tensors: reg
                .params()
                .iter()
                .map(|p| Tensor::zeros_like(&p.tensor))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.tensors[id.0].add_assign(g)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}
