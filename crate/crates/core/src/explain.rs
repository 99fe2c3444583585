//! Gradient-weighted class-activation maps: where in the frame the model
//! looked when scoring a class, rendered as heat-map overlays.

use std::path::Path;

use crate::data::write_ppm;
use crate::error::{Error, Result};
use crate::model::{FeatureMap, ModelGraph};
use crate::tensor::{resize_bilinear, Scalar, Tensor};

/// Names of the spatial layers a class-activation map can be taken from, in
/// forward order.
pub const GRADCAM_LAYERS: [&str; 3] = ["conv_lstm2d", "conv1", "primarycap_conv2d"];

/// Default explanation layer: the first plain convolution's output.
pub const DEFAULT_GRADCAM_LAYER: &str = "conv1";

fn parse_layer(name: &str) -> Result<FeatureMap> {
    match name {
        "conv_lstm2d" => Ok(FeatureMap::ConvLstm),
        "conv1" => Ok(FeatureMap::Conv1),
        "primarycap_conv2d" => Ok(FeatureMap::PrimaryConv),
        other => Err(Error::Argument(format!(
            "layer '{other}' has no spatial activation map; valid layers are {}",
            GRADCAM_LAYERS.join(", ")
        ))),
    }
}

/// Result of one class-activation computation.
#[derive(Clone, Debug)]
pub struct GradCam<T> {
    /// Localization map at frame resolution, `[H, W]`, values in `[0, 1]`.
    pub map: Tensor<T>,
    /// Class probabilities from the forward pass that produced the map.
    pub probs: Tensor<T>,
}

/// Computes the class-activation map for `target_class` from the named
/// layer's feature map.
///
/// The class score is the target's pre-softmax input at the classification
/// head. Each feature channel is weighted by the spatial mean of the score's
/// gradient over that channel, the weighted channels are summed, negative
/// cells are clipped to zero, and the result is min-max normalized and
/// bilinearly upsampled to frame resolution. A map with no variation (for
/// example when the score does not depend on the layer at all) comes back as
/// all zeros rather than dividing by zero.
///
/// The model's parameter values are untouched; parameter gradients are used
/// as scratch and cleared before returning.
pub fn gradcam<T: Scalar>(
    model: &mut ModelGraph<T>,
    clip: &Tensor<T>,
    target_class: usize,
    layer: &str,
) -> Result<GradCam<T>> {
    let feature = parse_layer(layer)?;
    let classes = model.config.num_classes;
    if target_class >= classes {
        return Err(Error::Argument(format!(
            "target class {target_class} is out of range for {classes} classes"
        )));
    }
    let (probs, ctx) = model.forward_clip(clip)?;
    // d(score)/d(head pre-activation) for the pre-softmax score of one class
    // is that class's unit vector.
    let mut seed = Tensor::zeros(&[classes]);
    seed.data_mut()[target_class] = T::one();
    let activations = model.feature_map(&ctx, feature)?;
    let grads = model.backward_to_feature_map(&ctx, &seed, feature)?;
    model.zero_grads();
    let weights = channel_means(&grads);
    let mut map = weighted_map(&activations, &weights);
    normalize_in_place(&mut map);
    let (h, w) = (model.config.height, model.config.width);
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    let map = resize_bilinear(&map.reshape(&[mh, mw, 1])?, h, w).reshape(&[h, w])?;
    Ok(GradCam { map, probs })
}

/// Per-channel spatial mean of an `[H, W, K]` tensor.
fn channel_means<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let k = x.shape()[2];
    let cells = x.len() / k;
    let inv = T::one() / T::from_f64(cells as f64);
    let mut means = vec![T::zero(); k];
    for (idx, &v) in x.data().iter().enumerate() {
        means[idx % k] = means[idx % k] + v;
    }
    for m in &mut means {
        *m = *m * inv;
    }
    means
}

/// Channel-weighted sum of an `[H, W, K]` feature map with negative cells
/// clipped to zero, `[H, W]`. A channel with a negative weight can only
/// lower cells, never raise them.
fn weighted_map<T: Scalar>(features: &Tensor<T>, weights: &[T]) -> Tensor<T> {
    let (h, w, k) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    debug_assert_eq!(weights.len(), k);
    let mut out = Tensor::zeros(&[h, w]);
    {
        let o = out.data_mut();
        for (idx, &v) in features.data().iter().enumerate() {
            o[idx / k] = o[idx / k] + weights[idx % k] * v;
        }
        for cell in o.iter_mut() {
            if *cell < T::zero() {
                *cell = T::zero();
            }
        }
    }
    out
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
fn normalize_in_place<T: Scalar>(map: &mut Tensor<T>) {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in map.data() {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    let range = hi - lo;
    if range > T::zero() {
        for v in map.data_mut() {
            *v = (*v - lo) / range;
        }
    } else {
        for v in map.data_mut() {
            *v = T::zero();
        }
    }
}

/// Heat color for an intensity in `[0, 1]` (inputs outside the range are
/// clamped): a piecewise-linear ramp through blue, cyan, green, yellow, red
/// at 0, 0.25, 0.5, 0.75, 1.
pub fn jet_color(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let v = v.clamp(0.0, 1.0);
    let scaled = v * 4.0;
    let seg = (scaled.floor() as usize).min(3);
    let t = scaled - seg as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let blend = STOPS[seg][c] + (STOPS[seg + 1][c] - STOPS[seg][c]) * t;
        rgb[c] = quantize_channel(blend);
    }
    rgb
}

/// Half-up rounding of a `[0, 255]` float channel to a byte.
fn quantize_channel(v: f64) -> u8 {
    (v.clamp(0.0, 255.0) + 0.5).floor() as u8
}

/// Blends a heat-colored map over an `[H, W, 3]` frame (channel values in
/// `[0, 1]`): `out = (1 − alpha)·frame + alpha·color`. `alpha` must lie in
/// `[0, 1]`; at 0 the output is the frame bit for bit.
pub fn render_overlay<T: Scalar>(
    frame: &Tensor<T>,
    map: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if frame.rank() != 3 || frame.shape()[2] != 3 {
        return Err(Error::Dimension(format!(
            "overlay frame must be [H, W, 3], got {:?}",
            frame.shape()
        )));
    }
    if map.shape() != &frame.shape()[..2] {
        return Err(Error::Dimension(format!(
            "map shape {:?} does not match frame {:?}",
            map.shape(),
            frame.shape()
        )));
    }
    if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let a = T::from_f64(alpha);
    let keep = T::one() - a;
    let inv255 = T::one() / T::from_f64(255.0);
    let mut out = frame.clone();
    {
        let o = out.data_mut();
        for (cell, &heat) in map.data().iter().enumerate() {
            let rgb = jet_color(heat.to_f64());
            for c in 0..3 {
                let color = T::from_f64(rgb[c] as f64) * inv255;
                o[cell * 3 + c] = keep * o[cell * 3 + c] + a * color;
            }
        }
    }
    Ok(out)
}

/// Writes an `[H, W, 3]` image with channel values in `[0, 1]` (clamped) as
/// a binary RGB netpbm file, quantizing each channel half-up: a value `v`
/// becomes `floor(255·v + 0.5)`, so 0.5 maps to 128.
pub fn write_image<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::Dimension(format!(
            "image must be [H, W, 3], got {:?}",
            image.shape()
        )));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| quantize_channel(v.to_f64() * 255.0))
        .collect();
    write_ppm(path, &bytes, image.shape()[0], image.shape()[1])
}

/// Canonical output file name for one clip/class heat map.
pub fn heatmap_filename(clip_id: &str, target_class: usize) -> String {
    format!("{clip_id}_cls{target_class}_gradcam.ppm")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::tensor::SeededRng;
    use tempfile::TempDir;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            frames: 2,
            height: 8,
            width: 8,
            channels: 3,
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
            routing_iterations: 2,
            lstm_units: 4,
            dense_units: vec![6],
            num_classes: 2,
            seed: 11,
        }
    }

    fn tiny_clip(seed: u64) -> Tensor<f64> {
        SeededRng::new(seed).uniform_tensor(&[2, 8, 8, 3], 0.0, 1.0)
    }

    #[test]
    fn map_is_frame_sized_and_in_unit_range() {
        let mut model = build_model::<f64>(&tiny_config()).unwrap();
        let clip = tiny_clip(3);
        for layer in GRADCAM_LAYERS {
            let cam = gradcam(&mut model, &clip, 1, layer).unwrap();
            assert_eq!(cam.map.shape(), &[8, 8], "{layer}");
            for &v in cam.map.data() {
                assert!((0.0..=1.0).contains(&v), "{layer}: {v}");
            }
            assert_eq!(cam.probs.shape(), &[2]);
        }
    }

    #[test]
    fn scaling_the_head_leaves_the_map_unchanged() {
        // The class score is linear in the head parameters, so scaling them
        // by a positive constant scales every channel weight by the same
        // constant and min-max normalization divides it back out.
        let config = tiny_config();
        let clip = tiny_clip(9);
        let mut base = build_model::<f64>(&config).unwrap();
        let reference = gradcam(&mut base, &clip, 0, "conv1").unwrap();
        let mut scaled = build_model::<f64>(&config).unwrap();
        for name in ["dense_2/kernel", "dense_2/bias"] {
            let mut value = scaled.param_value(name).unwrap();
            for v in value.data_mut() {
                *v *= 7.5;
            }
            scaled.set_param(name, &value).unwrap();
        }
        let cam = gradcam(&mut scaled, &clip, 0, "conv1").unwrap();
        for (a, b) in reference.map.data().iter().zip(cam.map.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn negatively_weighted_channels_never_raise_cells() {
        let features = Tensor::new(
            &[2, 2, 2],
            vec![
                1.0, 0.5, //
                2.0, 1.0, //
                0.0, 2.0, //
                3.0, 0.2,
            ],
        )
        .unwrap();
        let with_negative = weighted_map(&features, &[1.0, -0.5]);
        let without = weighted_map(&features, &[1.0, 0.0]);
        for (a, b) in with_negative.data().iter().zip(without.data()) {
            assert!(a <= b, "negative channel raised a cell: {a} > {b}");
            assert!(*a >= 0.0);
        }
    }

    #[test]
    fn identical_runs_produce_bitwise_identical_maps() {
        let clip: Tensor<f32> = SeededRng::new(3).uniform_tensor(&[2, 8, 8, 3], 0.0, 1.0);
        let run = || {
            let mut model = build_model::<f32>(&tiny_config()).unwrap();
            gradcam(&mut model, &clip, 1, "primarycap_conv2d")
                .unwrap()
                .map
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn disconnected_score_yields_an_all_zero_map() {
        let mut model = build_model::<f64>(&tiny_config()).unwrap();
        // Zero the head column feeding class 0: its score is then constant,
        // every activation gradient vanishes, and the guard must return a
        // flat zero map instead of dividing by a zero range.
        let mut kernel = model.param_value("dense_2/kernel").unwrap();
        let out = kernel.shape()[1];
        for row in 0..kernel.shape()[0] {
            kernel.data_mut()[row * out] = 0.0;
        }
        model.set_param("dense_2/kernel", &kernel).unwrap();
        let cam = gradcam(&mut model, &tiny_clip(5), 0, "conv1").unwrap();
        assert!(cam.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcam_clears_its_scratch_gradients() {
        let mut model = build_model::<f64>(&tiny_config()).unwrap();
        gradcam(&mut model, &tiny_clip(7), 1, "conv_lstm2d").unwrap();
        model.visit_params(&mut |name, p| {
            assert!(
                p.grad.data().iter().all(|&g| g == 0.0),
                "{name} kept scratch gradients"
            );
        });
    }

    #[test]
    fn unknown_and_non_spatial_layers_are_rejected_with_the_valid_list() {
        let mut model = build_model::<f64>(&tiny_config()).unwrap();
        let clip = tiny_clip(1);
        for bad in ["lstm_1", "primarycap_reshape", "dense_1", "nope"] {
            let err = gradcam(&mut model, &clip, 0, bad).unwrap_err();
            match err {
                Error::Argument(msg) => {
                    for valid in GRADCAM_LAYERS {
                        assert!(msg.contains(valid), "'{msg}' misses {valid}");
                    }
                }
                other => panic!("expected Argument, got {other:?}"),
            }
        }
        assert!(matches!(
            gradcam(&mut model, &clip, 2, "conv1"),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn color_ramp_hits_the_five_pinned_stops() {
        assert_eq!(jet_color(0.0), [0, 0, 255]);
        assert_eq!(jet_color(0.25), [0, 255, 255]);
        assert_eq!(jet_color(0.5), [0, 255, 0]);
        assert_eq!(jet_color(0.75), [255, 255, 0]);
        assert_eq!(jet_color(1.0), [255, 0, 0]);
        // Midpoint of the first segment interpolates green halfway up.
        assert_eq!(jet_color(0.125), [0, 128, 255]);
        // Out-of-range intensities clamp to the end stops.
        assert_eq!(jet_color(-3.0), [0, 0, 255]);
        assert_eq!(jet_color(2.0), [255, 0, 0]);
    }

    #[test]
    fn zero_alpha_overlay_is_the_frame_bit_for_bit() {
        let frame: Tensor<f32> = SeededRng::new(8).uniform_tensor(&[4, 5, 3], 0.0, 1.0);
        let map: Tensor<f32> = SeededRng::new(9).uniform_tensor(&[4, 5], 0.0, 1.0);
        let out = render_overlay(&frame, &map, 0.0).unwrap();
        assert_eq!(out.data(), frame.data());
    }

    #[test]
    fn full_alpha_overlay_is_the_color_ramp_alone() {
        let frame: Tensor<f64> = Tensor::zeros(&[1, 2, 3]);
        let map = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let out = render_overlay(&frame, &map, 1.0).unwrap();
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("ramp.ppm");
        write_image(&path, &out).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 6..];
        assert_eq!(payload, &[0, 0, 255, 255, 0, 0]);
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let frame: Tensor<f64> = Tensor::zeros(&[2, 2, 3]);
        let map: Tensor<f64> = Tensor::zeros(&[2, 2]);
        for alpha in [-0.01, 1.01, f64::NAN] {
            assert!(matches!(
                render_overlay(&frame, &map, alpha),
                Err(Error::Argument(_))
            ));
        }
        let wrong: Tensor<f64> = Tensor::zeros(&[3, 2]);
        assert!(render_overlay(&frame, &wrong, 0.5).is_err());
    }

    #[test]
    fn image_quantization_rounds_half_up() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("q.ppm");
        let image = Tensor::new(&[1, 1, 3], vec![0.5, 0.0, 1.0]).unwrap();
        write_image(&path, &image).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 0, 255]);
    }

    #[test]
    fn heatmap_filenames_follow_the_clip_class_convention() {
        assert_eq!(heatmap_filename("clip42", 1), "clip42_cls1_gradcam.ppm");
        assert_eq!(heatmap_filename("a", 0), "a_cls0_gradcam.ppm");
    }
}
