//! Convolutional LSTM over a `[T, H, W, C]` frame sequence, returning the
//! final hidden feature map.
//!
//! Each gate is a same-padded, stride-one convolution over the input frame
//! concatenated channel-wise with the previous hidden state, so the hidden
//! map keeps the input's spatial extents at every step.

use super::{sigmoid, LayerParams, GATE_NAMES as GATES};
use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, Padding, Scalar, SeededRng, Tensor};

#[derive(Debug, Clone)]
pub struct ConvLstm2d<T> {
    pub name: String,
    pub params: LayerParams<T>,
    in_channels: usize,
    filters: usize,
    kernel: usize,
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    /// Input frame concatenated with the previous hidden state, `[H, W, C+F]`.
    stacked: Tensor<T>,
    c_prev: Tensor<T>,
    /// Post-activation gate maps in [`GATES`] order, each `[H, W, F]`.
    gates: [Tensor<T>; 4],
    tanh_cell: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ConvLstm2dCtx<T> {
    steps: Vec<StepCache<T>>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> ConvLstm2d<T> {
    /// The forget-gate bias starts at one, matching the dense recurrence.
    pub fn new(
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let mut params = LayerParams::new();
        let stacked = in_channels + filters;
        let fan_in = kernel * kernel * stacked;
        let fan_out = kernel * kernel * filters;
        for gate in GATES {
            params
                .insert(
                    &format!("kernel_{gate}"),
                    rng.glorot_uniform(&[kernel, kernel, stacked, filters], fan_in, fan_out),
                )
                .expect("fresh params");
            let bias = if gate == "forget" {
                Tensor::filled(&[filters], T::one())
            } else {
                Tensor::zeros(&[filters])
            };
            params
                .insert(&format!("bias_{gate}"), bias)
                .expect("fresh params");
        }
        Self {
            name: name.to_string(),
            params,
            in_channels,
            filters,
            kernel,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// Runs the recurrence over `seq` of shape `[T, H, W, C]` and returns the
    /// final hidden map of shape `[H, W, filters]`.
    pub fn forward(&self, seq: &Tensor<T>) -> Result<(Tensor<T>, ConvLstm2dCtx<T>)> {
        if seq.rank() != 4 || seq.shape()[3] != self.in_channels {
            return Err(Error::Dimension(format!(
                "conv-lstm {} expects [steps, h, w, {}] input, got {:?}",
                self.name,
                self.in_channels,
                seq.shape()
            )));
        }
        let (steps, h, w) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
        let frame_len = h * w * self.in_channels;
        let mut hidden = Tensor::zeros(&[h, w, self.filters]);
        let mut cell = Tensor::zeros(&[h, w, self.filters]);
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let frame = Tensor::new(
                &[h, w, self.in_channels],
                seq.data()[t * frame_len..(t + 1) * frame_len].to_vec(),
            )?;
            let stacked = concat_channels(&frame, &hidden);
            let mut gates: Vec<Tensor<T>> = Vec::with_capacity(4);
            for gate in GATES {
                let pre = conv2d_forward(
                    &stacked,
                    self.params.value(&format!("kernel_{gate}")),
                    self.params.value(&format!("bias_{gate}")),
                    1,
                    Padding::Same,
                )?;
                gates.push(if gate == "cell" {
                    pre.map(|v| v.tanh())
                } else {
                    pre.map(sigmoid)
                });
            }
            let c_prev = cell.clone();
            let [gi, gf, gg, go] = [&gates[0], &gates[1], &gates[2], &gates[3]];
            for idx in 0..cell.len() {
                cell.data_mut()[idx] =
                    gf.data()[idx] * c_prev.data()[idx] + gi.data()[idx] * gg.data()[idx];
            }
            let tanh_cell = cell.map(|v| v.tanh());
            for idx in 0..hidden.len() {
                hidden.data_mut()[idx] = go.data()[idx] * tanh_cell.data()[idx];
            }
            let mut it = gates.into_iter();
            caches.push(StepCache {
                stacked,
                c_prev,
                gates: [
                    it.next().unwrap(),
                    it.next().unwrap(),
                    it.next().unwrap(),
                    it.next().unwrap(),
                ],
                tanh_cell,
            });
        }
        Ok((
            hidden,
            ConvLstm2dCtx {
                steps: caches,
                input_shape: seq.shape().to_vec(),
            },
        ))
    }

    /// Backpropagates through every timestep. `upstream` is the gradient with
    /// respect to the final hidden map; the return value is the gradient with
    /// respect to the input sequence. Parameter gradients accumulate.
    pub fn backward(&mut self, ctx: &ConvLstm2dCtx<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (ctx.input_shape[1], ctx.input_shape[2]);
        if upstream.shape() != [h, w, self.filters] {
            return Err(Error::Dimension(format!(
                "conv-lstm {} expects [{h}, {w}, {}] upstream gradient, got {:?}",
                self.name,
                self.filters,
                upstream.shape()
            )));
        }
        let frame_len = h * w * self.in_channels;
        let mut grad_seq = Tensor::zeros(&ctx.input_shape);
        let mut dh = upstream.clone();
        let mut dc: Tensor<T> = Tensor::zeros(&[h, w, self.filters]);
        let one = T::one();
        for t in (0..ctx.steps.len()).rev() {
            let cache = &ctx.steps[t];
            let [gi, gf, gg, go] = [
                &cache.gates[0],
                &cache.gates[1],
                &cache.gates[2],
                &cache.gates[3],
            ];
            // Pre-activation gate gradients, in GATES order.
            let mut dpre: [Tensor<T>; 4] = [
                Tensor::zeros(&[h, w, self.filters]),
                Tensor::zeros(&[h, w, self.filters]),
                Tensor::zeros(&[h, w, self.filters]),
                Tensor::zeros(&[h, w, self.filters]),
            ];
            for idx in 0..dh.len() {
                let tc = cache.tanh_cell.data()[idx];
                let (iv, fv, gv, ov) = (
                    gi.data()[idx],
                    gf.data()[idx],
                    gg.data()[idx],
                    go.data()[idx],
                );
                let dcell = dc.data()[idx] + dh.data()[idx] * ov * (one - tc * tc);
                dpre[3].data_mut()[idx] = dh.data()[idx] * tc * ov * (one - ov);
                dpre[0].data_mut()[idx] = dcell * gv * iv * (one - iv);
                dpre[1].data_mut()[idx] = dcell * cache.c_prev.data()[idx] * fv * (one - fv);
                dpre[2].data_mut()[idx] = dcell * iv * (one - gv * gv);
                dc.data_mut()[idx] = dcell * fv;
            }
            let mut dstacked = Tensor::zeros(cache.stacked.shape());
            for gidx in 0..4 {
                let name = format!("kernel_{}", GATES[gidx]);
                let (dz, dk, db) = conv2d_backward(
                    &cache.stacked,
                    self.params.value(&name),
                    &dpre[gidx],
                    1,
                    Padding::Same,
                )?;
                dstacked.add_assign(&dz);
                self.params.accumulate(&name, &dk);
                self.params
                    .accumulate(&format!("bias_{}", GATES[gidx]), &db);
            }
            let (dframe, dh_prev) = split_channels(&dstacked, self.in_channels);
            grad_seq.data_mut()[t * frame_len..(t + 1) * frame_len].copy_from_slice(dframe.data());
            dh = dh_prev;
        }
        Ok(grad_seq)
    }
}

/// Stacks `a` (`[H, W, Ca]`) and `b` (`[H, W, Cb]`) along the channel axis.
fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let (ca, cb) = (a.shape()[2], b.shape()[2]);
    let mut data = Vec::with_capacity(h * w * (ca + cb));
    for p in 0..h * w {
        data.extend_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        data.extend_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Tensor::new(&[h, w, ca + cb], data).expect("consistent extents")
}

/// Splits `[H, W, Ca+Cb]` back into `[H, W, Ca]` and `[H, W, Cb]`.
fn split_channels<T: Scalar>(z: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (h, w, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let cb = c - ca;
    let mut a = Vec::with_capacity(h * w * ca);
    let mut b = Vec::with_capacity(h * w * cb);
    for p in 0..h * w {
        let row = &z.data()[p * c..(p + 1) * c];
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    (
        Tensor::new(&[h, w, ca], a).expect("consistent extents"),
        Tensor::new(&[h, w, cb], b).expect("consistent extents"),
    )
}
