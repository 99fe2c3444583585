//! Model assembly: the recurrent-convolutional capsule classifier over
//! fixed-length frame sequences, its parameter bookkeeping, batched
//! forward/backward passes, and weight serialization.

use crate::capsule::{CapsuleLayer, CapsuleLayerCtx, PrimaryCaps, PrimaryCapsCtx};
use crate::error::{Error, Result};
use crate::layers::{
    Conv2dCtx, Conv2dLayer, ConvLstm2d, ConvLstm2dCtx, Dense, DenseActivation, DenseCtx, Lstm,
    LstmCtx, Param,
};
use crate::tensor::{conv_output_extent, Dtype, Padding, Scalar, SeededRng, Tensor};
use crate::training::categorical_cross_entropy;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Every dimension of the architecture, plus the initialization seed.
///
/// [`ModelConfig::full`] is the reference configuration; [`ModelConfig::small`]
/// is a reduced variant for desk-scale experiments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub convlstm_filters: usize,
    pub convlstm_kernel: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub primary_channels: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub caps_dim: usize,
    pub caps_out_count: usize,
    pub caps_out_dim: usize,
    pub routing_iterations: usize,
    pub lstm_units: usize,
    pub dense_units: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-size reference architecture: 5 frames of 128×128 RGB, 128 ConvLSTM
    /// filters, two 256-channel convolutions, 8-dim primary capsules routed to
    /// two 16-dim secondary capsules, a 1024-unit LSTM, and a
    /// 1024/512/256/64/2 dense head.
    pub fn full() -> Self {
        Self {
            frames: 5,
            height: 128,
            width: 128,
            channels: 3,
            convlstm_filters: 128,
            convlstm_kernel: 3,
            conv1_channels: 256,
            conv1_kernel: 9,
            conv1_stride: 1,
            primary_channels: 256,
            primary_kernel: 9,
            primary_stride: 2,
            caps_dim: 8,
            caps_out_count: 2,
            caps_out_dim: 16,
            routing_iterations: 3,
            lstm_units: 1024,
            dense_units: vec![1024, 512, 256, 64],
            num_classes: 2,
            seed: 42,
        }
    }

    /// Reduced architecture with the same topology: 32×32 frames, 8 ConvLSTM
    /// filters, 16-channel convolutions, 4-dim primary capsules, two 8-dim
    /// secondary capsules, a 32-unit LSTM, and a 32/16/8/4/2 head.
    pub fn small() -> Self {
        Self {
            frames: 5,
            height: 32,
            width: 32,
            channels: 3,
            convlstm_filters: 8,
            convlstm_kernel: 3,
            conv1_channels: 16,
            conv1_kernel: 9,
            conv1_stride: 1,
            primary_channels: 16,
            primary_kernel: 9,
            primary_stride: 2,
            caps_dim: 4,
            caps_out_count: 2,
            caps_out_dim: 8,
            routing_iterations: 3,
            lstm_units: 32,
            dense_units: vec![32, 16, 8, 4],
            num_classes: 2,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.frames >= 1, "frames must be at least 1")?;
        check(self.channels >= 1, "channels must be at least 1")?;
        check(self.num_classes >= 2, "num_classes must be at least 2")?;
        check(
            self.convlstm_kernel >= 1,
            "convlstm_kernel must be at least 1",
        )?;
        check(self.conv1_stride >= 1, "conv1_stride must be at least 1")?;
        check(
            self.primary_stride >= 1,
            "primary_stride must be at least 1",
        )?;
        check(
            self.routing_iterations >= 1,
            "routing_iterations must be at least 1",
        )?;
        check(self.lstm_units >= 1, "lstm_units must be at least 1")?;
        check(
            self.caps_out_count >= 1,
            "caps_out_count must be at least 1",
        )?;
        check(self.caps_out_dim >= 1, "caps_out_dim must be at least 1")?;
        check(
            self.conv1_kernel >= 1 && self.conv1_kernel <= self.height.min(self.width),
            "conv1_kernel must fit within the frame",
        )?;
        let (h1, w1) = self.conv1_output();
        check(
            self.primary_kernel >= 1 && self.primary_kernel <= h1.min(w1),
            "primary_kernel must fit within the first convolution's output",
        )?;
        check(
            self.caps_dim >= 1 && self.primary_channels.is_multiple_of(self.caps_dim),
            "caps_dim must evenly divide primary_channels",
        )?;
        Ok(())
    }

    /// Spatial extents after the first convolution (valid padding).
    fn conv1_output(&self) -> (usize, usize) {
        (
            conv_output_extent(
                self.height,
                self.conv1_kernel,
                self.conv1_stride,
                Padding::Valid,
            ),
            conv_output_extent(
                self.width,
                self.conv1_kernel,
                self.conv1_stride,
                Padding::Valid,
            ),
        )
    }

    /// Spatial extents after the primary-capsule convolution.
    fn primary_output(&self) -> (usize, usize) {
        let (h1, w1) = self.conv1_output();
        (
            conv_output_extent(h1, self.primary_kernel, self.primary_stride, Padding::Valid),
            conv_output_extent(w1, self.primary_kernel, self.primary_stride, Padding::Valid),
        )
    }

    /// Number of primary capsules.
    fn primary_count(&self) -> usize {
        let (h2, w2) = self.primary_output();
        h2 * w2 * self.primary_channels / self.caps_dim
    }

    /// Expected shape of one input clip.
    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

/// One per-layer line of the model summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryRow {
    pub name: String,
    pub output_shape: Vec<usize>,
    pub param_count: usize,
}

/// Renders summary rows as an aligned text table with a totals line.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:<20} {:>12}\n",
        "Layer", "Output Shape", "Params"
    ));
    out.push_str(&format!("{}\n", "-".repeat(58)));
    let mut total = 0usize;
    for row in rows {
        let shape = format!(
            "({})",
            row.output_shape
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        );
        out.push_str(&format!(
            "{:<24} {:<20} {:>12}\n",
            row.name, shape, row.param_count
        ));
        total += row.param_count;
    }
    out.push_str(&format!("{}\n", "-".repeat(58)));
    out.push_str(&format!("Total params: {total}\n"));
    out
}

/// The assembled network: ConvLSTM → convolution → primary capsules → routed
/// secondary capsules → LSTM over the capsule sequence → dense head.
#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    pub config: ModelConfig,
    pub convlstm: ConvLstm2d<T>,
    pub conv1: Conv2dLayer<T>,
    pub primary: PrimaryCaps<T>,
    pub secondary: CapsuleLayer<T>,
    pub lstm: Lstm<T>,
    pub denses: Vec<Dense<T>>,
}

/// Identifies one of the spatial `[H, W, K]` feature maps cached by a clip
/// forward pass: the recurrent convolution's final hidden map, the first
/// convolution's rectified output, or the capsule-forming convolution's
/// output (taken before the vectors are squashed).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMap {
    ConvLstm,
    Conv1,
    PrimaryConv,
}

/// Everything cached by a single-clip forward pass, enough to backpropagate
/// or to inspect intermediate activations.
#[derive(Debug, Clone)]
pub struct ClipCtx<T> {
    /// Final hidden map of the ConvLSTM, `[H, W, F]`.
    pub convlstm_out: Tensor<T>,
    /// Post-activation output of the first convolution.
    pub conv1_out: Tensor<T>,
    /// Softmax class probabilities.
    pub probs: Tensor<T>,
    convlstm_ctx: ConvLstm2dCtx<T>,
    conv1_ctx: Conv2dCtx<T>,
    primary_ctx: PrimaryCapsCtx<T>,
    secondary_ctx: CapsuleLayerCtx<T>,
    lstm_ctx: LstmCtx<T>,
    dense_ctxs: Vec<DenseCtx<T>>,
}

impl<T> ClipCtx<T> {
    /// Pre-squash primary-capsule context (exposes the primary convolution's
    /// output through [`PrimaryCaps::conv_output`]).
    pub fn primary_ctx(&self) -> &PrimaryCapsCtx<T> {
        &self.primary_ctx
    }
}

/// Builds the network described by `config` with seeded initialization.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<ModelGraph<T>> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let convlstm = ConvLstm2d::new(
        "conv_lstm2d",
        config.channels,
        config.convlstm_filters,
        config.convlstm_kernel,
        &mut rng,
    );
    let conv1 = Conv2dLayer::new(
        "conv1",
        config.convlstm_filters,
        config.conv1_channels,
        config.conv1_kernel,
        config.conv1_stride,
        Padding::Valid,
        true,
        &mut rng,
    );
    let primary = PrimaryCaps::new(
        "primarycap_conv2d",
        config.conv1_channels,
        config.primary_channels,
        config.primary_kernel,
        config.primary_stride,
        config.caps_dim,
        &mut rng,
    )?;
    let secondary = CapsuleLayer::new(
        "secondarycap",
        config.primary_count(),
        config.caps_dim,
        config.caps_out_count,
        config.caps_out_dim,
        config.routing_iterations,
        &mut rng,
    )?;
    let lstm = Lstm::new("lstm_1", config.caps_out_dim, config.lstm_units, &mut rng);
    let mut denses = Vec::with_capacity(config.dense_units.len() + 1);
    let mut input_dim = config.lstm_units;
    for (idx, &units) in config.dense_units.iter().enumerate() {
        denses.push(Dense::new(
            &format!("dense_{}", idx + 1),
            input_dim,
            units,
            DenseActivation::Relu,
            &mut rng,
        ));
        input_dim = units;
    }
    denses.push(Dense::new(
        &format!("dense_{}", config.dense_units.len() + 1),
        input_dim,
        config.num_classes,
        DenseActivation::Softmax,
        &mut rng,
    ));
    Ok(ModelGraph {
        config: config.clone(),
        convlstm,
        conv1,
        primary,
        secondary,
        lstm,
        denses,
    })
}

impl<T: Scalar> ModelGraph<T> {
    /// One row per layer, in forward order, including the zero-parameter
    /// reshape/squash bookkeeping rows.
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        let c = &self.config;
        let (h1, w1) = c.conv1_output();
        let (h2, w2) = c.primary_output();
        let row = |name: &str, shape: Vec<usize>, params: usize| SummaryRow {
            name: name.to_string(),
            output_shape: shape,
            param_count: params,
        };
        let mut rows = vec![
            row(
                "conv_lstm2d",
                vec![c.height, c.width, c.convlstm_filters],
                self.convlstm.param_count(),
            ),
            row(
                "conv1",
                vec![h1, w1, c.conv1_channels],
                self.conv1.param_count(),
            ),
            row(
                "primarycap_conv2d",
                vec![h2, w2, c.primary_channels],
                self.primary.conv.param_count(),
            ),
            row("primarycap_reshape", vec![c.primary_count(), c.caps_dim], 0),
            row("primarycap_squash", vec![c.primary_count(), c.caps_dim], 0),
            row(
                "secondarycap",
                vec![c.caps_out_count, c.caps_out_dim],
                self.secondary.param_count(),
            ),
            row("lstm_1", vec![c.lstm_units], self.lstm.param_count()),
        ];
        for dense in &self.denses {
            rows.push(row(
                &dense.name,
                vec![dense.output_dim()],
                dense.param_count(),
            ));
        }
        rows
    }

    pub fn summary(&self) -> String {
        render_summary(&self.summary_rows())
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| total += p.value.len());
        total
    }

    /// Visits every parameter in deterministic traversal order as
    /// `"<layer>/<param>"`.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (name, p) in self.convlstm.params.iter() {
            f(&format!("{}/{}", self.convlstm.name, name), p);
        }
        for (name, p) in self.conv1.params.iter() {
            f(&format!("{}/{}", self.conv1.name, name), p);
        }
        for (name, p) in self.primary.conv.params.iter() {
            f(&format!("{}/{}", self.primary.conv.name, name), p);
        }
        for (name, p) in self.secondary.params.iter() {
            f(&format!("{}/{}", self.secondary.name, name), p);
        }
        for (name, p) in self.lstm.params.iter() {
            f(&format!("{}/{}", self.lstm.name, name), p);
        }
        for dense in &self.denses {
            for (name, p) in dense.params.iter() {
                f(&format!("{}/{}", dense.name, name), p);
            }
        }
    }

    /// Mutable variant of [`ModelGraph::visit_params`], same order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let convlstm_name = self.convlstm.name.clone();
        for (name, p) in self.convlstm.params.iter_mut() {
            f(&format!("{convlstm_name}/{name}"), p);
        }
        let conv1_name = self.conv1.name.clone();
        for (name, p) in self.conv1.params.iter_mut() {
            f(&format!("{conv1_name}/{name}"), p);
        }
        let primary_name = self.primary.conv.name.clone();
        for (name, p) in self.primary.conv.params.iter_mut() {
            f(&format!("{primary_name}/{name}"), p);
        }
        let secondary_name = self.secondary.name.clone();
        for (name, p) in self.secondary.params.iter_mut() {
            f(&format!("{secondary_name}/{name}"), p);
        }
        let lstm_name = self.lstm.name.clone();
        for (name, p) in self.lstm.params.iter_mut() {
            f(&format!("{lstm_name}/{name}"), p);
        }
        for dense in &mut self.denses {
            let dense_name = dense.name.clone();
            for (name, p) in dense.params.iter_mut() {
                f(&format!("{dense_name}/{name}"), p);
            }
        }
    }

    /// Clears every gradient accumulator.
    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.grad.fill(T::zero()));
    }

    /// Clones the value of the named parameter, if present.
    pub fn param_value(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit_params(&mut |n, p| {
            if n == name {
                found = Some(p.value.clone());
            }
        });
        found
    }

    /// Clones the gradient accumulator of the named parameter, if present.
    pub fn param_grad(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit_params(&mut |n, p| {
            if n == name {
                found = Some(p.grad.clone());
            }
        });
        found
    }

    /// Replaces the value of the named parameter.
    pub fn set_param(&mut self, name: &str, value: &Tensor<T>) -> Result<()> {
        let mut outcome = Err(Error::Argument(format!("unknown parameter \"{name}\"")));
        self.visit_params_mut(&mut |n, p| {
            if n == name {
                outcome = if p.value.shape() == value.shape() {
                    p.value = value.clone();
                    Ok(())
                } else {
                    Err(Error::Dimension(format!(
                        "parameter \"{name}\" has shape {:?}, got {:?}",
                        p.value.shape(),
                        value.shape()
                    )))
                };
            }
        });
        outcome
    }

    /// Forward pass over a single `[frames, H, W, C]` clip, returning class
    /// probabilities and the cached intermediate state.
    pub fn forward_clip(&self, clip: &Tensor<T>) -> Result<(Tensor<T>, ClipCtx<T>)> {
        if clip.shape() != self.config.clip_shape() {
            return Err(Error::Dimension(format!(
                "expected clip shape {:?}, got {:?}",
                self.config.clip_shape(),
                clip.shape()
            )));
        }
        let (convlstm_out, convlstm_ctx) = self.convlstm.forward(clip)?;
        let (conv1_out, conv1_ctx) = self.conv1.forward(&convlstm_out)?;
        let (primary_bank, primary_ctx) = self.primary.forward(&conv1_out)?;
        let (secondary_bank, secondary_ctx) = self.secondary.forward(&primary_bank)?;
        let (hidden, lstm_ctx) = self.lstm.forward(&secondary_bank.poses)?;
        let mut dense_ctxs = Vec::with_capacity(self.denses.len());
        let mut x = hidden;
        for dense in &self.denses {
            let (y, ctx) = dense.forward(&x)?;
            dense_ctxs.push(ctx);
            x = y;
        }
        let probs = x;
        Ok((
            probs.clone(),
            ClipCtx {
                convlstm_out,
                conv1_out,
                probs,
                convlstm_ctx,
                conv1_ctx,
                primary_ctx,
                secondary_ctx,
                lstm_ctx,
                dense_ctxs,
            },
        ))
    }

    /// Backward pass for one clip, seeded with the gradient at the final
    /// dense layer's pre-activation. Accumulates parameter gradients and
    /// returns the gradient with respect to the clip.
    pub fn backward_clip(
        &mut self,
        ctx: &ClipCtx<T>,
        grad_head_preact: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut grad = self
            .denses
            .last_mut()
            .expect("model has a classification head")
            .backward_preact(
                ctx.dense_ctxs.last().expect("ctx per dense"),
                grad_head_preact,
            )?;
        for idx in (0..self.denses.len() - 1).rev() {
            grad = self.denses[idx].backward(&ctx.dense_ctxs[idx], &grad)?;
        }
        let grad_seq = self.lstm.backward(&ctx.lstm_ctx, &grad)?;
        let grad_poses = self.secondary.backward(&ctx.secondary_ctx, &grad_seq)?;
        let grad_features = self.primary.backward(&ctx.primary_ctx, &grad_poses)?;
        let grad_map = self.conv1.backward(&ctx.conv1_ctx, &grad_features)?;
        self.convlstm.backward(&ctx.convlstm_ctx, &grad_map)
    }

    /// Spatial `[H, W, K]` feature map cached by a clip forward pass.
    pub fn feature_map(&self, ctx: &ClipCtx<T>, layer: FeatureMap) -> Result<Tensor<T>> {
        match layer {
            FeatureMap::ConvLstm => Ok(ctx.convlstm_out.clone()),
            FeatureMap::Conv1 => Ok(ctx.conv1_out.clone()),
            FeatureMap::PrimaryConv => self.primary.conv_output(&ctx.primary_ctx),
        }
    }

    /// Backward pass from the classification head's pre-activation down to
    /// the gradient at `layer`'s spatial feature map, stopping there.
    /// Parameter gradients along the traversed suffix accumulate as a side
    /// effect, exactly as in [`ModelGraph::backward_clip`]; callers that only
    /// want the activation gradient should `zero_grads` afterwards.
    pub fn backward_to_feature_map(
        &mut self,
        ctx: &ClipCtx<T>,
        grad_head_preact: &Tensor<T>,
        layer: FeatureMap,
    ) -> Result<Tensor<T>> {
        let mut grad = self
            .denses
            .last_mut()
            .expect("model has a classification head")
            .backward_preact(
                ctx.dense_ctxs.last().expect("ctx per dense"),
                grad_head_preact,
            )?;
        for idx in (0..self.denses.len() - 1).rev() {
            grad = self.denses[idx].backward(&ctx.dense_ctxs[idx], &grad)?;
        }
        let grad_seq = self.lstm.backward(&ctx.lstm_ctx, &grad)?;
        let grad_poses = self.secondary.backward(&ctx.secondary_ctx, &grad_seq)?;
        let grad_conv = self
            .primary
            .grad_at_conv_output(&ctx.primary_ctx, &grad_poses)?;
        if layer == FeatureMap::PrimaryConv {
            return Ok(grad_conv);
        }
        let grad_features = self
            .primary
            .backward_from_conv_output(&ctx.primary_ctx, &grad_conv)?;
        if layer == FeatureMap::Conv1 {
            return Ok(grad_features);
        }
        self.conv1.backward(&ctx.conv1_ctx, &grad_features)
    }

    /// Batched forward pass: `[B, frames, H, W, C]` → `[B, classes]` softmax
    /// probabilities.
    pub fn model_forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let clips = self.check_batch(batch)?;
        let clip_len = batch.len() / clips;
        let classes = self.config.num_classes;
        let mut out = Tensor::zeros(&[clips, classes]);
        for b in 0..clips {
            let clip = Tensor::new(
                &self.config.clip_shape(),
                batch.data()[b * clip_len..(b + 1) * clip_len].to_vec(),
            )?;
            let (probs, _) = self.forward_clip(&clip)?;
            out.data_mut()[b * classes..(b + 1) * classes].copy_from_slice(probs.data());
        }
        Ok(out)
    }

    /// Batched backward pass: runs forward and backward per clip, accumulates
    /// gradients for every parameter, and returns the mean cross-entropy loss
    /// together with the `[B, classes]` probabilities of the forward pass.
    pub fn model_backward(
        &mut self,
        batch: &Tensor<T>,
        onehot: &Tensor<T>,
    ) -> Result<(T, Tensor<T>)> {
        let clips = self.check_batch(batch)?;
        let classes = self.config.num_classes;
        if onehot.shape() != [clips, classes] {
            return Err(Error::Dimension(format!(
                "expected labels [{clips}, {classes}], got {:?}",
                onehot.shape()
            )));
        }
        let clip_len = batch.len() / clips;
        let inv_b = T::one() / T::from_f64(clips as f64);
        let mut probs_out = Tensor::zeros(&[clips, classes]);
        let mut loss = T::zero();
        for b in 0..clips {
            let clip = Tensor::new(
                &self.config.clip_shape(),
                batch.data()[b * clip_len..(b + 1) * clip_len].to_vec(),
            )?;
            let (probs, ctx) = self.forward_clip(&clip)?;
            probs_out.data_mut()[b * classes..(b + 1) * classes].copy_from_slice(probs.data());
            let row_probs = probs.reshape(&[1, classes])?;
            let row_labels = Tensor::new(
                &[1, classes],
                onehot.data()[b * classes..(b + 1) * classes].to_vec(),
            )?;
            let (clip_loss, mut seed) = categorical_cross_entropy(&row_probs, &row_labels)?;
            loss = loss + clip_loss * inv_b;
            // The fused gradient above is per-clip; rescale to the batch mean.
            seed.scale(inv_b);
            let seed = seed.reshape(&[classes])?;
            self.backward_clip(&ctx, &seed)?;
        }
        Ok((loss, probs_out))
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let expected = self.config.clip_shape();
        if batch.rank() != 5 || batch.shape()[1..] != expected {
            return Err(Error::Dimension(format!(
                "expected batch [n, {}, {}, {}, {}], got {:?}",
                expected[0],
                expected[1],
                expected[2],
                expected[3],
                batch.shape()
            )));
        }
        Ok(batch.shape()[0])
    }

    /// Writes every parameter to a binary weights file; the round trip is
    /// bitwise exact.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
        self.visit_params(&mut |name, p| entries.push((name.to_string(), p.value.clone())));
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, value) in &entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.rank() as u32).to_le_bytes())?;
            for &extent in value.shape() {
                w.write_all(&(extent as u32).to_le_bytes())?;
            }
            w.write_all(&[dtype_tag(T::DTYPE)])?;
            write_values(&mut w, value.data())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a weights file written by [`ModelGraph::save_weights`],
    /// validating tensor names, shapes, and element type against this model's
    /// architecture in traversal order.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_bytes(&mut r, &mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format(
                "not a weights file (bad magic bytes)".to_string(),
            ));
        }
        let version = read_u32(&mut r)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!(
                "unsupported weights version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        self.visit_params(&mut |name, p| {
            expected.push((name.to_string(), p.value.shape().to_vec()))
        });
        if count != expected.len() {
            return Err(Error::Format(format!(
                "weights file holds {count} tensors, model expects {}",
                expected.len()
            )));
        }
        let mut loaded: Vec<Tensor<T>> = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_bytes(&mut r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("tensor name is not UTF-8".to_string()))?;
            if &name != want_name {
                return Err(Error::Format(format!(
                    "weights file tensor \"{name}\" does not match expected \"{want_name}\""
                )));
            }
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            if &shape != want_shape {
                return Err(Error::Format(format!(
                    "tensor \"{name}\" has shape {shape:?}, model expects {want_shape:?}"
                )));
            }
            let mut tag = [0u8; 1];
            read_bytes(&mut r, &mut tag)?;
            if tag[0] != dtype_tag(T::DTYPE) {
                return Err(Error::Format(format!(
                    "tensor \"{name}\" has element-type tag {}, model expects {}",
                    tag[0],
                    dtype_tag(T::DTYPE)
                )));
            }
            let len: usize = shape.iter().product();
            let values = read_values::<T>(&mut r, len)?;
            loaded.push(Tensor::new(&shape, values)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("weights file has trailing bytes".to_string()));
        }
        let mut it = loaded.into_iter();
        self.visit_params_mut(&mut |_, p| {
            p.value = it.next().expect("one loaded tensor per parameter");
        });
        Ok(())
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"CAPW";
const WEIGHTS_VERSION: u32 = 1;

fn dtype_tag(dtype: Dtype) -> u8 {
    match dtype {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    }
}

fn write_values<T: Scalar, W: Write>(w: &mut W, data: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8192 * 8);
    for chunk in data.chunks(8192) {
        buf.clear();
        for &v in chunk {
            match T::DTYPE {
                Dtype::F32 => buf.extend_from_slice(&v.to_f32().to_le_bytes()),
                Dtype::F64 => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_values<T: Scalar>(r: &mut impl Read, len: usize) -> Result<Vec<T>> {
    let elem = match T::DTYPE {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut values = Vec::with_capacity(len);
    let mut buf = vec![0u8; 8192 * elem];
    let mut remaining = len;
    while remaining > 0 {
        let take = remaining.min(8192);
        let bytes = &mut buf[..take * elem];
        read_bytes(r, bytes)?;
        for i in 0..take {
            let v = match T::DTYPE {
                Dtype::F32 => T::from_f32(f32::from_le_bytes(
                    bytes[i * 4..(i + 1) * 4].try_into().expect("4 bytes"),
                )),
                Dtype::F64 => T::from_f64(f64::from_le_bytes(
                    bytes[i * 8..(i + 1) * 8].try_into().expect("8 bytes"),
                )),
            };
            values.push(v);
        }
        remaining -= take;
    }
    Ok(values)
}

/// `read_exact` with truncation reported as a format error rather than I/O.
fn read_bytes(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("weights file is truncated".to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_bytes(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_scaled;
    use tempfile::tempdir;

    /// Tiny architecture used for exhaustive finite-difference checks.
    fn micro_config() -> ModelConfig {
        ModelConfig {
            frames: 2,
            height: 10,
            width: 10,
            channels: 2,
            convlstm_filters: 2,
            convlstm_kernel: 3,
            conv1_channels: 4,
            conv1_kernel: 3,
            conv1_stride: 1,
            primary_channels: 4,
            primary_kernel: 3,
            primary_stride: 2,
            caps_dim: 2,
            caps_out_count: 2,
            caps_out_dim: 3,
            routing_iterations: 3,
            lstm_units: 6,
            dense_units: vec![8],
            num_classes: 2,
            seed: 7,
        }
    }

    fn random_batch(config: &ModelConfig, clips: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        let [f, h, w, c] = config.clip_shape();
        rng.uniform_tensor(&[clips, f, h, w, c], 0.0, 1.0)
    }

    fn one_hot(labels: &[usize], classes: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[labels.len(), classes]);
        for (row, &label) in labels.iter().enumerate() {
            t.data_mut()[row * classes + label] = 1.0;
        }
        t
    }

    #[test]
    fn reference_architecture_reproduces_published_bookkeeping() {
        let model: ModelGraph<f32> = build_model(&ModelConfig::full()).unwrap();
        let rows = model.summary_rows();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv_lstm2d",
                "conv1",
                "primarycap_conv2d",
                "primarycap_reshape",
                "primarycap_squash",
                "secondarycap",
                "lstm_1",
                "dense_1",
                "dense_2",
                "dense_3",
                "dense_4",
                "dense_5",
            ]
        );
        let shapes: Vec<&[usize]> = rows.iter().map(|r| r.output_shape.as_slice()).collect();
        assert_eq!(
            shapes,
            [
                &[128, 128, 128][..],
                &[120, 120, 256],
                &[56, 56, 256],
                &[100_352, 8],
                &[100_352, 8],
                &[2, 16],
                &[1024],
                &[1024],
                &[512],
                &[256],
                &[64],
                &[2],
            ]
        );
        let params: Vec<usize> = rows.iter().map(|r| r.param_count).collect();
        assert_eq!(
            params,
            [
                604_160, 2_654_464, 5_308_672, 0, 0, 25_690_112, 4_263_936, 1_049_600, 524_800,
                131_328, 16_448, 130
            ]
        );
        assert_eq!(model.param_count(), 40_243_650);

        let text = model.summary();
        assert!(text.contains("secondarycap"));
        assert!(text.contains("25690112"));
        assert!(text.contains("dense_4"));
        assert!(text.contains("16448"));
        assert!(text.contains("Total params: 40243650"));
    }

    #[test]
    fn empty_summary_totals_zero() {
        let text = render_summary(&[]);
        assert!(text.contains("Total params: 0"));
    }

    #[test]
    fn small_architecture_is_shape_consistent() {
        let config = ModelConfig::small();
        let model: ModelGraph<f32> = build_model(&config).unwrap();
        assert_eq!(model.param_count(), 57_734);

        let mut rng = SeededRng::new(3);
        let batch: Tensor<f32> = rng.uniform_tensor(&[2, 5, 32, 32, 3], 0.0, 1.0);
        let probs = model.model_forward(&batch).unwrap();
        assert_eq!(probs.shape(), &[2, 2]);
        for row in probs.data().chunks(2) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
        }

        let again = model.model_forward(&batch).unwrap();
        assert_eq!(probs.data(), again.data());
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut config = ModelConfig::small();
        config.caps_dim = 5;
        assert!(matches!(build_model::<f32>(&config), Err(Error::Config(_))));

        let mut config = ModelConfig::small();
        config.conv1_kernel = 64;
        assert!(matches!(build_model::<f32>(&config), Err(Error::Config(_))));
    }

    #[test]
    fn forward_rejects_wrong_extents() {
        let model: ModelGraph<f64> = build_model(&micro_config()).unwrap();
        assert!(model
            .model_forward(&Tensor::zeros(&[1, 2, 10, 10, 3]))
            .is_err());
        assert!(model
            .model_forward(&Tensor::zeros(&[2, 10, 10, 2]))
            .is_err());
    }

    #[test]
    fn single_clip_matches_its_batch_row() {
        let config = micro_config();
        let model: ModelGraph<f64> = build_model(&config).unwrap();
        let batch = random_batch(&config, 4, 11);
        let all = model.model_forward(&batch).unwrap();

        let clip_len = batch.len() / 4;
        let third = Tensor::new(
            &[1, 2, 10, 10, 2],
            batch.data()[2 * clip_len..3 * clip_len].to_vec(),
        )
        .unwrap();
        let single = model.model_forward(&third).unwrap();
        assert_eq!(single.data(), &all.data()[4..6]);
    }

    #[test]
    fn backward_populates_every_gradient() {
        let config = micro_config();
        let mut model: ModelGraph<f64> = build_model(&config).unwrap();
        let batch = random_batch(&config, 2, 13);
        let labels = one_hot(&[0, 1], 2);
        let (loss, probs) = model.model_backward(&batch, &labels).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(probs.shape(), &[2, 2]);
        model.visit_params(&mut |name, p| {
            let nonzero = p.grad.data().iter().filter(|&&g| g != 0.0).count();
            assert!(nonzero > 0, "no gradient reached {name}");
        });
    }

    #[test]
    fn backward_rejects_label_mismatch() {
        let config = micro_config();
        let mut model: ModelGraph<f64> = build_model(&config).unwrap();
        let batch = random_batch(&config, 2, 13);
        let labels = one_hot(&[0, 1, 0], 2);
        assert!(model.model_backward(&batch, &labels).is_err());
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let config = micro_config();
        let mut model: ModelGraph<f64> = build_model(&config).unwrap();
        let batch = random_batch(&config, 2, 17);
        let labels = one_hot(&[1, 0], 2);

        // At initialization every dense bias is zero while the recurrent
        // output is tiny, so rectified pre-activations cluster at the kink
        // where one-sided slopes disagree and finite differences are
        // meaningless. Shifting the dense biases moves the evaluation point
        // into the interior of a smooth piece; correctness of the backward
        // pass does not depend on which point is probed.
        let mut nudge = SeededRng::new(4242);
        let mut bias_names = Vec::new();
        model.visit_params(&mut |name, _| {
            if name.starts_with("dense_") && name.ends_with("/bias") {
                bias_names.push(name.to_string());
            }
        });
        for name in &bias_names {
            let mut bias = model.param_value(name).unwrap();
            for v in bias.data_mut() {
                *v += 0.05 + 0.2 * nudge.next_f64();
            }
            model.set_param(name, &bias).unwrap();
        }

        let mut work = model.clone();
        work.model_backward(&batch, &labels).unwrap();

        let mut names = Vec::new();
        model.visit_params(&mut |name, _| names.push(name.to_string()));
        let mut worst: f64 = 0.0;
        for name in names {
            let analytic = work.param_grad(&name).unwrap();
            let point = model.param_value(&name).unwrap();
            let base = model.clone();
            let b = batch.clone();
            let y = labels.clone();
            let nm = name.clone();
            // Two numerical hazards shape the step and the metric here.
            // The loss is only piecewise smooth (rectified units downstream
            // of the recurrent layer sit close to zero), so steps of 1e-5
            // and up cross kinks and corrupt the difference quotient; 1e-6
            // stays inside one smooth piece. And early-layer gradients
            // reach 1e-10, below the cancellation noise of the difference,
            // so coordinates under 1e-3 are measured against that scale.
            let err = grad_check_scaled(
                &mut |p: &Tensor<f64>| {
                    let mut probe = base.clone();
                    probe.set_param(&nm, p)?;
                    let probs = probe.model_forward(&b)?;
                    Ok(categorical_cross_entropy(&probs, &y)?.0)
                },
                &analytic,
                &point,
                1e-6,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} err = {err}");
            worst = worst.max(err);
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn duplicated_batch_leaves_mean_gradient_unchanged() {
        let config = micro_config();
        let batch = random_batch(&config, 2, 19);
        let labels = one_hot(&[1, 0], 2);

        let mut once: ModelGraph<f64> = build_model(&config).unwrap();
        once.model_backward(&batch, &labels).unwrap();

        let clip_len = batch.len() / 2;
        let mut doubled_data = batch.data().to_vec();
        doubled_data.extend_from_slice(&batch.data()[..clip_len]);
        doubled_data.extend_from_slice(&batch.data()[clip_len..]);
        let doubled = Tensor::new(&[4, 2, 10, 10, 2], doubled_data).unwrap();
        let doubled_labels = one_hot(&[1, 0, 1, 0], 2);
        let mut twice: ModelGraph<f64> = build_model(&config).unwrap();
        twice.model_backward(&doubled, &doubled_labels).unwrap();

        once.visit_params(&mut |name, p| {
            let other = twice.param_grad(name).unwrap();
            for (a, b) in p.grad.data().iter().zip(other.data()) {
                assert!((a - b).abs() < 1e-9, "{name}: {a} vs {b}");
            }
        });
    }

    #[test]
    fn weights_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.capw");
        let config = micro_config();
        let model: ModelGraph<f64> = build_model(&config).unwrap();
        model.save_weights(&path).unwrap();

        let mut restored: ModelGraph<f64> =
            build_model(&ModelConfig { seed: 99, ..config }).unwrap();
        restored.load_weights(&path).unwrap();
        model.visit_params(&mut |name, p| {
            let other = restored.param_value(name).unwrap();
            assert_eq!(p.value.data(), other.data(), "{name} differs");
        });
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.capw");
        let model: ModelGraph<f64> = build_model(&micro_config()).unwrap();
        model.save_weights(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let mut target: ModelGraph<f64> = build_model(&micro_config()).unwrap();
        assert!(matches!(target.load_weights(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.capw");
        let model: ModelGraph<f64> = build_model(&micro_config()).unwrap();
        model.save_weights(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let mut target: ModelGraph<f64> = build_model(&micro_config()).unwrap();
        assert!(matches!(target.load_weights(&path), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_architecture_names_first_differing_tensor() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("small.capw");
        let small: ModelGraph<f32> = build_model(&ModelConfig::small()).unwrap();
        small.save_weights(&path).unwrap();

        let mut full: ModelGraph<f32> = build_model(&ModelConfig::full()).unwrap();
        match full.load_weights(&path) {
            Err(Error::Format(msg)) => {
                assert!(
                    msg.contains("conv_lstm2d/kernel_input"),
                    "error should name the first differing tensor, got: {msg}"
                );
            }
            other => panic!("expected format error, got {other:?}"),
        }

        // A file with a different tensor inventory is rejected up front.
        let mut micro: ModelGraph<f32> = build_model(&micro_config()).unwrap();
        assert!(matches!(micro.load_weights(&path), Err(Error::Format(_))));
    }
}
