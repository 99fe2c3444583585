//! Fully connected layer over a single feature vector.

use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::{softmax_axis, Scalar, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseActivation {
    Relu,
    Softmax,
    None,
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub name: String,
    pub params: LayerParams<T>,
    pub activation: DenseActivation,
    input_dim: usize,
    output_dim: usize,
}

/// Cached forward state used by the backward pass.
#[derive(Debug, Clone)]
pub struct DenseCtx<T> {
    input: Tensor<T>,
    preact: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(
        name: &str,
        input_dim: usize,
        output_dim: usize,
        activation: DenseActivation,
        rng: &mut SeededRng,
    ) -> Self {
        let mut params = LayerParams::new();
        params
            .insert(
                "kernel",
                rng.glorot_uniform(&[input_dim, output_dim], input_dim, output_dim),
            )
            .expect("fresh params");
        params
            .insert("bias", Tensor::zeros(&[output_dim]))
            .expect("fresh params");
        Self {
            name: name.to_string(),
            params,
            activation,
            input_dim,
            output_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// `Din*Dout` weights plus `Dout` biases.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// `y = act(x W + b)` for a `[Din]` vector.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseCtx<T>)> {
        if x.shape() != [self.input_dim] {
            return Err(Error::Dimension(format!(
                "dense \"{}\" expects input [{}], got {:?}",
                self.name,
                self.input_dim,
                x.shape()
            )));
        }
        let weights = self.params.value("kernel");
        let bias = self.params.value("bias");
        let mut preact = Tensor::zeros(&[self.output_dim]);
        {
            let out = preact.data_mut();
            out.copy_from_slice(bias.data());
            let wd = weights.data();
            for (k, &xv) in x.data().iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let row = &wd[k * self.output_dim..(k + 1) * self.output_dim];
                for (o, &w) in out.iter_mut().zip(row) {
                    *o = *o + xv * w;
                }
            }
        }
        let output = match self.activation {
            DenseActivation::Relu => preact.map(|v| if v > T::zero() { v } else { T::zero() }),
            DenseActivation::Softmax => softmax_axis(&preact, 0)?,
            DenseActivation::None => preact.clone(),
        };
        Ok((
            output,
            DenseCtx {
                input: x.clone(),
                preact,
            },
        ))
    }

    /// Backward through the activation and the affine map. Not valid for the
    /// softmax activation, whose gradient is fused with the loss; use
    /// [`Dense::backward_preact`] there.
    pub fn backward(&mut self, ctx: &DenseCtx<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let grad_preact = match self.activation {
            DenseActivation::Relu => {
                let mut g = grad_output.clone();
                for (gv, &p) in g.data_mut().iter_mut().zip(ctx.preact.data()) {
                    if p <= T::zero() {
                        *gv = T::zero();
                    }
                }
                g
            }
            DenseActivation::None => grad_output.clone(),
            DenseActivation::Softmax => {
                return Err(Error::Argument(format!(
                    "dense \"{}\": softmax backward must be seeded at the pre-activation",
                    self.name
                )))
            }
        };
        self.backward_preact(ctx, &grad_preact)
    }

    /// Backward given the gradient with respect to the pre-activation
    /// (`x W + b`). Accumulates kernel and bias gradients, returns the
    /// gradient with respect to the input.
    pub fn backward_preact(
        &mut self,
        ctx: &DenseCtx<T>,
        grad_preact: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if grad_preact.shape() != [self.output_dim] {
            return Err(Error::Dimension(format!(
                "dense \"{}\" backward expects gradient [{}], got {:?}",
                self.name,
                self.output_dim,
                grad_preact.shape()
            )));
        }
        // grad_W[k, j] = x[k] * g[j]; grad_b = g; grad_x[k] = W[k, :] . g
        let mut grad_weights = Tensor::zeros(&[self.input_dim, self.output_dim]);
        {
            let gw = grad_weights.data_mut();
            for (k, &xv) in ctx.input.data().iter().enumerate() {
                let row = &mut gw[k * self.output_dim..(k + 1) * self.output_dim];
                for (dst, &g) in row.iter_mut().zip(grad_preact.data()) {
                    *dst = xv * g;
                }
            }
        }
        let mut grad_input = Tensor::zeros(&[self.input_dim]);
        {
            let wd = self.params.value("kernel").data();
            let gi = grad_input.data_mut();
            for (k, dst) in gi.iter_mut().enumerate() {
                let row = &wd[k * self.output_dim..(k + 1) * self.output_dim];
                let mut acc = T::zero();
                for (&w, &g) in row.iter().zip(grad_preact.data()) {
                    acc = acc + w * g;
                }
                *dst = acc;
            }
        }
        self.params.accumulate("kernel", &grad_weights);
        self.params.accumulate("bias", grad_preact);
        Ok(grad_input)
    }
}
