//! Capsule primitives: the squash nonlinearity, primary capsule construction
//! (convolution → reshape → squash), and the secondary capsule layer with
//! dynamic routing-by-agreement.

use crate::error::{Error, Result};
use crate::layers::{Conv2dCtx, Conv2dLayer, LayerParams};
use crate::tensor::{softmax_axis, softmax_axis_backward, Padding, Scalar, SeededRng, Tensor};

/// Keeps the squash denominator away from zero for vanishing activity vectors.
pub const SQUASH_EPSILON: f64 = 1e-7;

/// A bank of capsule activity vectors, one per row.
#[derive(Debug, Clone)]
pub struct CapsuleBank<T> {
    /// `[capsule_count, capsule_dim]` activity vectors.
    pub poses: Tensor<T>,
}

impl<T: Scalar> CapsuleBank<T> {
    pub fn new(poses: Tensor<T>) -> Result<Self> {
        if poses.rank() != 2 {
            return Err(Error::Dimension(format!(
                "capsule bank expects rank-2 poses, got {:?}",
                poses.shape()
            )));
        }
        Ok(Self { poses })
    }

    pub fn count(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.poses.shape()[1]
    }
}

/// Scale factor applied to an activity vector of norm `n`:
/// `n² / ((1 + n²)(n + ε))`, shrinking any vector into the unit ball while
/// preserving its direction.
fn squash_scale<T: Scalar>(norm: T) -> T {
    let eps = T::from_f64(SQUASH_EPSILON);
    let sq = norm * norm;
    sq / ((T::one() + sq) * (norm + eps))
}

/// Derivative of [`squash_scale`] with respect to the norm.
fn squash_scale_derivative<T: Scalar>(norm: T) -> T {
    let eps = T::from_f64(SQUASH_EPSILON);
    let one = T::one();
    let sq = norm * norm;
    let denom = (one + sq) * (norm + eps);
    let ddenom = (norm + norm) * (norm + eps) + (one + sq);
    ((norm + norm) * denom - sq * ddenom) / (denom * denom)
}

/// Applies the squash nonlinearity along the last axis.
pub fn squash<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    let dim = *s.shape().last().expect("squash input must have rank >= 1");
    let mut out = s.clone();
    for row in out.data_mut().chunks_mut(dim) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let scale = squash_scale(norm);
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    out
}

/// Gradient of [`squash`] with respect to its input, given the gradient with
/// respect to its output. `s` is the original (pre-squash) input.
pub fn squash_backward<T: Scalar>(s: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        s.shape(),
        upstream.shape(),
        "squash gradient shape mismatch"
    );
    let dim = *s.shape().last().expect("squash input must have rank >= 1");
    let mut out = Tensor::zeros(s.shape());
    let src = s.data();
    let up = upstream.data();
    for (r, chunk) in out.data_mut().chunks_mut(dim).enumerate() {
        let row = &src[r * dim..(r + 1) * dim];
        let grad = &up[r * dim..(r + 1) * dim];
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            // The scale vanishes quadratically at the origin, so the
            // derivative there is exactly zero.
            continue;
        }
        let scale = squash_scale(norm);
        let radial = squash_scale_derivative(norm) / norm;
        let dot = row.iter().zip(grad.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for d in 0..dim {
            chunk[d] = scale * grad[d] + radial * dot * row[d];
        }
    }
    out
}

/// Per-iteration routing quantities retained for the backward pass.
#[derive(Debug, Clone)]
struct RoutingStep<T> {
    couplings: Tensor<T>,
    raw_out: Tensor<T>,
    out: Tensor<T>,
}

/// Final logits and couplings of a routing run, plus the per-iteration
/// trajectory needed to differentiate through the unrolled loop.
#[derive(Debug, Clone)]
pub struct RoutingState<T> {
    /// Agreement logits `b` as used in the final iteration, `[Nin, Nout]`.
    pub logits: Tensor<T>,
    /// Couplings `c` of the final iteration; every row sums to one.
    pub couplings: Tensor<T>,
    /// Number of iterations that ran.
    pub iterations: usize,
    trajectory: Vec<RoutingStep<T>>,
}

/// Dynamic routing-by-agreement over prediction vectors `u_hat` of shape
/// `[Nin, Nout, Dout]`. Logits start at zero; every iteration computes
/// couplings as a softmax over the output axis, forms each output capsule as
/// the coupling-weighted sum of predictions, and squashes it. All iterations
/// except the last then add the prediction/output agreement back onto the
/// logits. Returns the final `[Nout, Dout]` output capsules.
pub fn routing_by_agreement<T: Scalar>(
    u_hat: &Tensor<T>,
    iterations: usize,
) -> Result<(Tensor<T>, RoutingState<T>)> {
    if iterations == 0 {
        return Err(Error::Argument(
            "routing requires at least one iteration".to_string(),
        ));
    }
    if u_hat.rank() != 3 {
        return Err(Error::Dimension(format!(
            "routing expects [inputs, outputs, dim] predictions, got {:?}",
            u_hat.shape()
        )));
    }
    let (nin, nout, dout) = (u_hat.shape()[0], u_hat.shape()[1], u_hat.shape()[2]);
    let preds = u_hat.data();
    let mut logits: Tensor<T> = Tensor::zeros(&[nin, nout]);
    let mut trajectory = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let couplings = softmax_axis(&logits, 1)?;
        let mut raw_out: Tensor<T> = Tensor::zeros(&[nout, dout]);
        {
            let s = raw_out.data_mut();
            let c = couplings.data();
            for i in 0..nin {
                for j in 0..nout {
                    let cij = c[i * nout + j];
                    let pred = &preds[(i * nout + j) * dout..(i * nout + j + 1) * dout];
                    let acc = &mut s[j * dout..(j + 1) * dout];
                    for d in 0..dout {
                        acc[d] = acc[d] + cij * pred[d];
                    }
                }
            }
        }
        let out = squash(&raw_out);
        if t + 1 < iterations {
            let b = logits.data_mut();
            let v = out.data();
            for i in 0..nin {
                for j in 0..nout {
                    let pred = &preds[(i * nout + j) * dout..(i * nout + j + 1) * dout];
                    let vj = &v[j * dout..(j + 1) * dout];
                    let mut agreement = T::zero();
                    for d in 0..dout {
                        agreement = agreement + pred[d] * vj[d];
                    }
                    b[i * nout + j] = b[i * nout + j] + agreement;
                }
            }
        }
        trajectory.push(RoutingStep {
            couplings,
            raw_out,
            out,
        });
    }
    let last = trajectory.last().expect("at least one iteration");
    let out = last.out.clone();
    let couplings = last.couplings.clone();
    Ok((
        out,
        RoutingState {
            logits,
            couplings,
            iterations,
            trajectory,
        },
    ))
}

/// Gradient of [`routing_by_agreement`] with respect to the predictions,
/// differentiating through every unrolled iteration.
pub fn routing_backward<T: Scalar>(
    u_hat: &Tensor<T>,
    state: &RoutingState<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (nin, nout, dout) = (u_hat.shape()[0], u_hat.shape()[1], u_hat.shape()[2]);
    if upstream.shape() != [nout, dout] {
        return Err(Error::Dimension(format!(
            "routing gradient expects [{nout}, {dout}], got {:?}",
            upstream.shape()
        )));
    }
    let preds = u_hat.data();
    let mut grad_preds: Tensor<T> = Tensor::zeros(u_hat.shape());
    let mut grad_logits: Tensor<T> = Tensor::zeros(&[nin, nout]);
    let last = state.iterations - 1;
    for t in (0..state.iterations).rev() {
        let step = &state.trajectory[t];
        // Gradient arriving at this iteration's output capsules: the external
        // gradient for the final iteration, otherwise the contribution of the
        // logit update b += u_hat · v that consumed them.
        let mut grad_out: Tensor<T> = if t == last {
            upstream.clone()
        } else {
            Tensor::zeros(&[nout, dout])
        };
        if t != last {
            let dv = grad_out.data_mut();
            let gl = grad_logits.data();
            let v = step.out.data();
            let gp = grad_preds.data_mut();
            for i in 0..nin {
                for j in 0..nout {
                    let db = gl[i * nout + j];
                    let pred = &preds[(i * nout + j) * dout..(i * nout + j + 1) * dout];
                    let gpred = &mut gp[(i * nout + j) * dout..(i * nout + j + 1) * dout];
                    for d in 0..dout {
                        dv[j * dout + d] = dv[j * dout + d] + db * pred[d];
                        gpred[d] = gpred[d] + db * v[j * dout + d];
                    }
                }
            }
        }
        let grad_raw = squash_backward(&step.raw_out, &grad_out);
        // raw_out[j] = Σ_i c[i,j] · u_hat[i,j], so the gradient splits into a
        // coupling part and a prediction part.
        let mut grad_couplings: Tensor<T> = Tensor::zeros(&[nin, nout]);
        {
            let gc = grad_couplings.data_mut();
            let gs = grad_raw.data();
            let c = step.couplings.data();
            let gp = grad_preds.data_mut();
            for i in 0..nin {
                for j in 0..nout {
                    let pred = &preds[(i * nout + j) * dout..(i * nout + j + 1) * dout];
                    let gpred = &mut gp[(i * nout + j) * dout..(i * nout + j + 1) * dout];
                    let cij = c[i * nout + j];
                    let mut acc = T::zero();
                    for d in 0..dout {
                        acc = acc + pred[d] * gs[j * dout + d];
                        gpred[d] = gpred[d] + cij * gs[j * dout + d];
                    }
                    gc[i * nout + j] = acc;
                }
            }
        }
        let through_softmax = softmax_axis_backward(&step.couplings, &grad_couplings, 1)?;
        // The logit gradient carried across iterations passes through the
        // additive update unchanged and gains the softmax term of this step.
        grad_logits.add_assign(&through_softmax);
    }
    Ok(grad_preds)
}

/// Primary capsules: a strided convolution whose output channels are regrouped
/// into fixed-size activity vectors and squashed.
#[derive(Debug, Clone)]
pub struct PrimaryCaps<T> {
    pub conv: Conv2dLayer<T>,
    caps_dim: usize,
}

#[derive(Debug, Clone)]
pub struct PrimaryCapsCtx<T> {
    conv_ctx: Conv2dCtx<T>,
    /// Reshaped pre-squash capsules, `[count, caps_dim]`.
    raw_poses: Tensor<T>,
    feature_shape: Vec<usize>,
}

impl<T: Scalar> PrimaryCaps<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        caps_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if caps_dim == 0 || !out_channels.is_multiple_of(caps_dim) {
            return Err(Error::Argument(format!(
                "capsule dimension {caps_dim} must evenly divide {out_channels} output channels"
            )));
        }
        Ok(Self {
            conv: Conv2dLayer::new(
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                Padding::Valid,
                false,
                rng,
            ),
            caps_dim,
        })
    }

    pub fn caps_dim(&self) -> usize {
        self.caps_dim
    }

    /// Capsule count produced for an `[H, W, C]` feature map.
    pub fn output_count(&self, h: usize, w: usize) -> usize {
        let (oh, ow, oc) = self.conv.output_shape(h, w);
        oh * ow * oc / self.caps_dim
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<(CapsuleBank<T>, PrimaryCapsCtx<T>)> {
        let (conv_out, conv_ctx) = self.conv.forward(features)?;
        let count = conv_out.len() / self.caps_dim;
        let raw_poses = conv_out.reshape(&[count, self.caps_dim])?;
        let poses = squash(&raw_poses);
        Ok((
            CapsuleBank::new(poses)?,
            PrimaryCapsCtx {
                conv_ctx,
                raw_poses,
                feature_shape: features.shape().to_vec(),
            },
        ))
    }

    /// Accumulates convolution gradients and returns the gradient with respect
    /// to the input feature map.
    pub fn backward(&mut self, ctx: &PrimaryCapsCtx<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let grad_conv = self.grad_at_conv_output(ctx, upstream)?;
        self.backward_from_conv_output(ctx, &grad_conv)
    }

    /// First half of [`PrimaryCaps::backward`]: gradient with respect to the
    /// internal convolution's `[H, W, C]` output, before any parameters.
    pub fn grad_at_conv_output(
        &self,
        ctx: &PrimaryCapsCtx<T>,
        upstream: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let grad_raw = squash_backward(&ctx.raw_poses, upstream);
        let (oh, ow, oc) = self
            .conv
            .output_shape(ctx.feature_shape[0], ctx.feature_shape[1]);
        grad_raw.reshape(&[oh, ow, oc])
    }

    /// Second half of [`PrimaryCaps::backward`]: accumulates convolution
    /// gradients and continues to the input feature map.
    pub fn backward_from_conv_output(
        &mut self,
        ctx: &PrimaryCapsCtx<T>,
        grad_conv: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.conv.backward(&ctx.conv_ctx, grad_conv)
    }

    /// Pre-squash capsule poses of a forward pass, viewed as the internal
    /// convolution's `[H, W, C]` output.
    pub fn conv_output(&self, ctx: &PrimaryCapsCtx<T>) -> Result<Tensor<T>> {
        let (oh, ow, oc) = self
            .conv
            .output_shape(ctx.feature_shape[0], ctx.feature_shape[1]);
        ctx.raw_poses.clone().reshape(&[oh, ow, oc])
    }
}

/// Secondary capsule layer: a per-pair linear prediction `û_ij = W_ij · u_i`
/// (no bias) followed by routing-by-agreement.
#[derive(Debug, Clone)]
pub struct CapsuleLayer<T> {
    pub name: String,
    pub params: LayerParams<T>,
    in_count: usize,
    out_count: usize,
    in_dim: usize,
    out_dim: usize,
    iterations: usize,
}

#[derive(Debug, Clone)]
pub struct CapsuleLayerCtx<T> {
    input: Tensor<T>,
    u_hat: Tensor<T>,
    pub state: RoutingState<T>,
}

impl<T: Scalar> CapsuleLayer<T> {
    pub fn new(
        name: &str,
        in_count: usize,
        in_dim: usize,
        out_count: usize,
        out_dim: usize,
        iterations: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Argument(
                "routing requires at least one iteration".to_string(),
            ));
        }
        let mut params = LayerParams::new();
        params
            .insert(
                "weight",
                rng.glorot_uniform(&[in_count, out_count, out_dim, in_dim], in_dim, out_dim),
            )
            .expect("fresh params");
        Ok(Self {
            name: name.to_string(),
            params,
            in_count,
            out_count,
            in_dim,
            out_dim,
            iterations,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn out_count(&self) -> usize {
        self.out_count
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, input: &CapsuleBank<T>) -> Result<(CapsuleBank<T>, CapsuleLayerCtx<T>)> {
        if input.count() != self.in_count || input.dim() != self.in_dim {
            return Err(Error::Dimension(format!(
                "capsule layer {} expects [{}, {}] poses, got [{}, {}]",
                self.name,
                self.in_count,
                self.in_dim,
                input.count(),
                input.dim()
            )));
        }
        let (nin, nout, dout, din) = (self.in_count, self.out_count, self.out_dim, self.in_dim);
        let w = self.params.value("weight").data();
        let u = input.poses.data();
        let mut u_hat: Tensor<T> = Tensor::zeros(&[nin, nout, dout]);
        {
            let preds = u_hat.data_mut();
            for i in 0..nin {
                let pose = &u[i * din..(i + 1) * din];
                for j in 0..nout {
                    for d in 0..dout {
                        let row = &w[((i * nout + j) * dout + d) * din
                            ..((i * nout + j) * dout + d + 1) * din];
                        let mut acc = T::zero();
                        for e in 0..din {
                            acc = acc + row[e] * pose[e];
                        }
                        preds[(i * nout + j) * dout + d] = acc;
                    }
                }
            }
        }
        let (out, state) = routing_by_agreement(&u_hat, self.iterations)?;
        Ok((
            CapsuleBank::new(out)?,
            CapsuleLayerCtx {
                input: input.poses.clone(),
                u_hat,
                state,
            },
        ))
    }

    /// Accumulates the weight gradient and returns the gradient with respect
    /// to the input poses.
    pub fn backward(
        &mut self,
        ctx: &CapsuleLayerCtx<T>,
        upstream: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let grad_preds = routing_backward(&ctx.u_hat, &ctx.state, upstream)?;
        let (nin, nout, dout, din) = (self.in_count, self.out_count, self.out_dim, self.in_dim);
        let mut grad_weight: Tensor<T> = Tensor::zeros(&[nin, nout, dout, din]);
        let mut grad_input: Tensor<T> = Tensor::zeros(&[nin, din]);
        {
            let w = self.params.value("weight").data();
            let u = ctx.input.data();
            let gp = grad_preds.data();
            let gw = grad_weight.data_mut();
            let gu = grad_input.data_mut();
            for i in 0..nin {
                let pose = &u[i * din..(i + 1) * din];
                let gpose = &mut gu[i * din..(i + 1) * din];
                for j in 0..nout {
                    for d in 0..dout {
                        let g = gp[(i * nout + j) * dout + d];
                        if g == T::zero() {
                            continue;
                        }
                        let base = ((i * nout + j) * dout + d) * din;
                        for e in 0..din {
                            gw[base + e] = gw[base + e] + g * pose[e];
                            gpose[e] = gpose[e] + g * w[base + e];
                        }
                    }
                }
            }
        }
        self.params.accumulate("weight", &grad_weight);
        Ok(grad_input)
    }
}
