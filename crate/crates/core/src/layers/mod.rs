//! Stateful layers with explicit forward/backward contracts.
//!
//! Every layer owns its parameters as named tensors paired with gradient
//! accumulators of identical shape. Forward passes are pure given the
//! parameters; backward passes add into the accumulators and return the
//! gradient with respect to the layer input.

mod conv;
mod convlstm;
mod dense;
mod lstm;

pub use conv::{Conv2dCtx, Conv2dLayer};
pub use convlstm::{ConvLstm2d, ConvLstm2dCtx};
pub use dense::{Dense, DenseActivation, DenseCtx};
pub use lstm::{Lstm, LstmCtx, LstmState};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gate order shared by the recurrent layers: parameter names are suffixed
/// with these labels and cached activations use the same order.
pub(crate) const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

/// One named parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered map of parameter name to tensor-plus-gradient. Names are unique
/// within a layer and gradients always share the parameter's shape.
#[derive(Debug, Clone, Default)]
pub struct LayerParams<T> {
    entries: Vec<(String, Param<T>)>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Argument(format!(
                "duplicate parameter name \"{name}\""
            )));
        }
        let grad = value.zeros_like();
        self.entries.push((name.to_string(), Param { value, grad }));
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .unwrap_or_else(|| panic!("unknown parameter \"{name}\""))
    }

    pub fn value(&self, name: &str) -> &Tensor<T> {
        &self.get(name).value
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let param = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Argument(format!("unknown parameter \"{name}\"")))?;
        if param.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter \"{name}\" has shape {:?}, got {:?}",
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }

    /// Adds `grad` into the accumulator for `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) {
        let param = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .unwrap_or_else(|| panic!("unknown parameter \"{name}\""));
        param.grad.add_assign(grad);
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in &mut self.entries {
            p.grad.fill(T::zero());
        }
    }

    /// Total number of scalar parameters across all entries.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Elementwise activations with their pointwise derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Tanh => x.map(|v| v.tanh()),
        }
    }

    /// Multiplies `upstream` by the derivative, evaluated from the
    /// pre-activation input.
    pub fn backward<T: Scalar>(self, preact: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
        assert_eq!(preact.shape(), upstream.shape());
        let mut out = upstream.clone();
        match self {
            Activation::Relu => {
                for (g, &p) in out.data_mut().iter_mut().zip(preact.data()) {
                    if p <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            Activation::Sigmoid => {
                for (g, &p) in out.data_mut().iter_mut().zip(preact.data()) {
                    let s = sigmoid(p);
                    *g = *g * s * (T::one() - s);
                }
            }
            Activation::Tanh => {
                for (g, &p) in out.data_mut().iter_mut().zip(preact.data()) {
                    let t = p.tanh();
                    *g = *g * (T::one() - t * t);
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}
