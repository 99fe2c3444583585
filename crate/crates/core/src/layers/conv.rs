//! Stateful 2-d convolution layer over a channels-last frame.

use super::LayerParams;
use crate::error::Result;
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_output_extent, Padding, Scalar, SeededRng, Tensor,
};

#[derive(Debug, Clone)]
pub struct Conv2dLayer<T> {
    pub name: String,
    pub params: LayerParams<T>,
    pub relu: bool,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
}

#[derive(Debug, Clone)]
pub struct Conv2dCtx<T> {
    input: Tensor<T>,
    preact: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2dLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        relu: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let mut params = LayerParams::new();
        let fan_in = kernel * kernel * in_channels;
        let fan_out = kernel * kernel * out_channels;
        params
            .insert(
                "kernel",
                rng.glorot_uniform(
                    &[kernel, kernel, in_channels, out_channels],
                    fan_in,
                    fan_out,
                ),
            )
            .expect("fresh params");
        params
            .insert("bias", Tensor::zeros(&[out_channels]))
            .expect("fresh params");
        Self {
            name: name.to_string(),
            params,
            relu,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Output extents for an `[H, W, Cin]` input.
    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (
            conv_output_extent(h, self.kernel, self.stride, self.padding),
            conv_output_extent(w, self.kernel, self.stride, self.padding),
            self.out_channels,
        )
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Conv2dCtx<T>)> {
        let preact = conv2d_forward(
            input,
            self.params.value("kernel"),
            self.params.value("bias"),
            self.stride,
            self.padding,
        )?;
        if self.relu {
            let out = preact.map(|v| if v > T::zero() { v } else { T::zero() });
            Ok((
                out,
                Conv2dCtx {
                    input: input.clone(),
                    preact: Some(preact),
                },
            ))
        } else {
            Ok((
                preact,
                Conv2dCtx {
                    input: input.clone(),
                    preact: None,
                },
            ))
        }
    }

    /// Accumulates kernel/bias gradients and returns the input gradient.
    pub fn backward(&mut self, ctx: &Conv2dCtx<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let grad_preact = match &ctx.preact {
            Some(preact) => {
                let mut g = upstream.clone();
                for (gv, &p) in g.data_mut().iter_mut().zip(preact.data()) {
                    if p <= T::zero() {
                        *gv = T::zero();
                    }
                }
                g
            }
            None => upstream.clone(),
        };
        let (grad_input, grad_kernels, grad_bias) = conv2d_backward(
            &ctx.input,
            self.params.value("kernel"),
            &grad_preact,
            self.stride,
            self.padding,
        )?;
        self.params.accumulate("kernel", &grad_kernels);
        self.params.accumulate("bias", &grad_bias);
        Ok(grad_input)
    }
}
