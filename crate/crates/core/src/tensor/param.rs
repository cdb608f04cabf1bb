use super::elementwise::{softplus, softplus_inverse};
use super::Tensor;
use crate::error::{shape_err, Result};

/// How a parameter's stored value maps to the value used by the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    None,
    /// Effective value is `softplus(raw) > 0`.
    Softplus,
}

/// A named, learnable leaf tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    constraint: Constraint,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            tensor: Tensor::leaf(shape, data)?,
            constraint: Constraint::None,
            trainable: true,
        })
    }

    /// Positive scalar stored unconstrained behind a softplus.
    pub fn positive_scalar(name: impl Into<String>, effective: f64) -> Self {
        Self {
            name: name.into(),
            tensor: Tensor::leaf(&[1], vec![softplus_inverse(effective)]).expect("scalar"),
            constraint: Constraint::Softplus,
            trainable: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// The stored (raw) values, as optimised and checkpointed.
    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    /// Leaf tensor of raw values.
    pub fn raw(&self) -> &Tensor {
        &self.tensor
    }

    /// Value entering the forward pass (`softplus(raw)` when constrained).
    pub fn value(&self) -> Tensor {
        match self.constraint {
            Constraint::None => self.tensor.clone(),
            Constraint::Softplus => self.tensor.softplus(),
        }
    }

    /// Effective scalar value without building a graph node.
    pub fn effective_scalar(&self) -> f64 {
        let raw = self.tensor.data()[0];
        match self.constraint {
            Constraint::None => raw,
            Constraint::Softplus => softplus(raw),
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Frozen parameters are plain constants: no graph edges, no gradients.
    pub fn set_trainable(&mut self, trainable: bool) {
        if self.trainable != trainable {
            self.trainable = trainable;
            self.rebuild(self.tensor.to_vec());
        }
    }

    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.tensor.numel() {
            return Err(shape_err("Parameter::set_data", &self.name, self.tensor.numel(), data.len()));
        }
        self.rebuild(data);
        Ok(())
    }

    fn rebuild(&mut self, data: Vec<f64>) {
        let shape = self.tensor.shape().to_vec();
        self.tensor = if self.trainable {
            Tensor::leaf(&shape, data)
        } else {
            Tensor::new(&shape, data)
        }
        .expect("shape preserved");
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }
}
