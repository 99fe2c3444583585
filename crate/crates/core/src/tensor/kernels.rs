//! Raw numeric kernels: convolution (forward and backward), matrix multiply,
//! axis softmax and bilinear resampling.
//!
//! Convolutions run channels-last: inputs are `[H, W, Cin]`, kernels are
//! `[Kh, Kw, Cin, Cout]`, outputs `[Ho, Wo, Cout]`. Internally the input is
//! unrolled to a patch matrix (im2col) so the convolution reduces to one
//! matrix product, which is also how the backward pass recovers kernel and
//! input gradients.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by the kernel extent.
    Valid,
    /// Symmetric zero padding keeping `Ho = ceil(H / stride)`. When the total
    /// pad is odd the extra cell goes on the bottom/right.
    Same,
}

/// Output extent of a 1-d convolution.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => (input - kernel) / stride + 1,
        Padding::Same => input.div_ceil(stride),
    }
}

fn pad_amounts(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (total / 2, total - total / 2)
        }
    }
}

fn check_conv_args<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<()> {
    if stride == 0 {
        return Err(Error::Argument("stride must be positive".into()));
    }
    if input.rank() != 3 {
        return Err(Error::Dimension(format!(
            "conv2d input must be [H,W,Cin], got {:?}",
            input.shape()
        )));
    }
    if kernels.rank() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d kernels must be [Kh,Kw,Cin,Cout], got {:?}",
            kernels.shape()
        )));
    }
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, kcin, cout) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "kernel input channels {kcin} do not match input channels {cin}"
        )));
    }
    let (pt, pb) = pad_amounts(h, kh, stride, padding);
    let (pl, pr) = pad_amounts(w, kw, stride, padding);
    if kh > h + pt + pb || kw > w + pl + pr {
        return Err(Error::Dimension(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + pt + pb,
            w + pl + pr
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match output channels {cout}",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Unrolls input patches into a `[Ho*Wo, Kh*Kw*Cin]` matrix. Out-of-bounds
/// (padding) positions contribute zeros.
fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Tensor<T> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ho = conv_output_extent(h, kh, stride, padding);
    let wo = conv_output_extent(w, kw, stride, padding);
    let (pt, _) = pad_amounts(h, kh, stride, padding);
    let (pl, _) = pad_amounts(w, kw, stride, padding);
    let row_len = kh * kw * cin;
    let mut cols = vec![T::zero(); ho * wo * row_len];
    let src = input.data();
    for oh in 0..ho {
        for ow in 0..wo {
            let row = (oh * wo + ow) * row_len;
            for ky in 0..kh {
                let iy = (oh * stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ow * stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = row + (ky * kw + kx) * cin;
                    let s = (iy as usize * w + ix as usize) * cin;
                    cols[dst..dst + cin].copy_from_slice(&src[s..s + cin]);
                }
            }
        }
    }
    Tensor::new(&[ho * wo, row_len], cols).expect("im2col shape")
}

/// Scatters a `[Ho*Wo, Kh*Kw*Cin]` patch-gradient matrix back onto the input
/// grid, accumulating overlaps. Inverse of `im2col` under summation.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Tensor<T> {
    let ho = conv_output_extent(h, kh, stride, padding);
    let wo = conv_output_extent(w, kw, stride, padding);
    let (pt, _) = pad_amounts(h, kh, stride, padding);
    let (pl, _) = pad_amounts(w, kw, stride, padding);
    let row_len = kh * kw * cin;
    let mut out = vec![T::zero(); h * w * cin];
    let src = cols.data();
    for oh in 0..ho {
        for ow in 0..wo {
            let row = (oh * wo + ow) * row_len;
            for ky in 0..kh {
                let iy = (oh * stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ow * stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = row + (ky * kw + kx) * cin;
                    let d = (iy as usize * w + ix as usize) * cin;
                    for c in 0..cin {
                        out[d + c] = out[d + c] + src[s + c];
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cin], out).expect("col2im shape")
}

/// 2-d convolution of a channels-last frame with a bank of kernels.
///
/// Each output element is `bias[c] + sum over the receptive field`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_conv_args(input, kernels, Some(bias), stride, padding)?;
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let (kh, kw, cin, cout) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    let ho = conv_output_extent(h, kh, stride, padding);
    let wo = conv_output_extent(w, kw, stride, padding);

    let cols = im2col(input, kh, kw, stride, padding);
    // [Kh,Kw,Cin,Cout] is already row-major [Kh*Kw*Cin, Cout].
    let kmat = kernels.clone().reshape(&[kh * kw * cin, cout])?;
    let mut out = matmul(&cols, &kmat)?;
    for row in out.data_mut().chunks_exact_mut(cout) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    out.reshape(&[ho, wo, cout])
}

/// Gradients of `conv2d_forward` with respect to input, kernels and bias.
///
/// `upstream` must have the forward output shape. `grad_bias` is the
/// per-channel sum of `upstream`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_conv_args(input, kernels, None, stride, padding)?;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[3]);
    let ho = conv_output_extent(h, kh, stride, padding);
    let wo = conv_output_extent(w, kw, stride, padding);
    if upstream.shape() != [ho, wo, cout] {
        return Err(Error::Dimension(format!(
            "upstream shape {:?} does not match forward output [{ho}, {wo}, {cout}]",
            upstream.shape()
        )));
    }

    let up_mat = upstream.clone().reshape(&[ho * wo, cout])?;

    let mut grad_bias = Tensor::zeros(&[cout]);
    {
        let gb = grad_bias.data_mut();
        for row in up_mat.data().chunks_exact(cout) {
            for (g, &u) in gb.iter_mut().zip(row) {
                *g = *g + u;
            }
        }
    }

    let cols = im2col(input, kh, kw, stride, padding);
    let grad_kernels = matmul_at_b(&cols, &up_mat)?.reshape(&[kh, kw, cin, cout])?;

    let kmat = kernels.clone().reshape(&[kh * kw * cin, cout])?;
    let grad_cols = matmul_a_bt(&up_mat, &kmat)?;
    let grad_input = col2im(&grad_cols, h, w, cin, kh, kw, stride, padding);

    Ok((grad_input, grad_kernels, grad_bias))
}

/// Standard matrix product of `[M,K] x [K,N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: [{m},{k}] x [{kb},{n}]"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a^T x b` without materializing the transpose: `[K,M]^T x [K,N] -> [M,N]`.
fn matmul_at_b<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(Error::Dimension(format!(
            "matmul_at_b inner extents differ: [{k},{m}]^T x [{kb},{n}]"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for kk in 0..k {
        let arow = &ad[kk * m..(kk + 1) * m];
        let brow = &bd[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a x b^T` without materializing the transpose: `[M,K] x [N,K]^T -> [M,N]`.
fn matmul_a_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, kb) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(Error::Dimension(format!(
            "matmul_a_bt inner extents differ: [{m},{k}] x [{n},{kb}]^T"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Softmax along one axis with max-subtraction for overflow safety.
/// Slices along `axis` sum to 1.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Argument(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let extent = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = T::neg_infinity();
            for e in 0..extent {
                let v = data[base + e * inner];
                if v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for e in 0..extent {
                let idx = base + e * inner;
                let v = (data[idx] - max).exp();
                data[idx] = v;
                total = total + v;
            }
            for e in 0..extent {
                let idx = base + e * inner;
                data[idx] = data[idx] / total;
            }
        }
    }
    Ok(out)
}

/// Backward of `softmax_axis`: given the forward output `y` and the upstream
/// gradient, returns the gradient with respect to the logits,
/// `y * (upstream - sum(upstream * y))` per slice.
pub fn softmax_axis_backward<T: Scalar>(
    y: &Tensor<T>,
    upstream: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    if y.shape() != upstream.shape() {
        return Err(Error::Dimension(format!(
            "softmax backward shapes differ: {:?} vs {:?}",
            y.shape(),
            upstream.shape()
        )));
    }
    if axis >= y.rank() {
        return Err(Error::Argument(format!(
            "softmax axis {axis} out of range for rank {}",
            y.rank()
        )));
    }
    let extent = y.shape()[axis];
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let outer: usize = y.shape()[..axis].iter().product();
    let mut out = y.zeros_like();
    let yd = y.data();
    let ud = upstream.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut inner_sum = T::zero();
            for e in 0..extent {
                let idx = base + e * inner;
                inner_sum = inner_sum + ud[idx] * yd[idx];
            }
            for e in 0..extent {
                let idx = base + e * inner;
                od[idx] = yd[idx] * (ud[idx] - inner_sum);
            }
        }
    }
    Ok(out)
}

/// Bilinear resampling of `[H, W, C]` to `[out_h, out_w, C]` using half-pixel
/// sample centers and edge clamping. Pass-through when extents already match.
pub fn resize_bilinear<T: Scalar>(src: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    assert_eq!(src.rank(), 3, "resize_bilinear expects [H,W,C]");
    let (h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if h == out_h && w == out_w {
        return src.clone();
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let data = src.data();
    Tensor::from_fn(&[out_h, out_w, c], |flat| {
        let ch = flat % c;
        let ox = (flat / c) % out_w;
        let oy = flat / (c * out_w);
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).max(0.0);
        let sx = ((ox as f64 + 0.5) * scale_x - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(h - 1);
        let x0 = (sx.floor() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = T::from_f64(sy - y0 as f64);
        let fx = T::from_f64(sx - x0 as f64);
        let one = T::one();
        let v00 = data[(y0 * w + x0) * c + ch];
        let v01 = data[(y0 * w + x1) * c + ch];
        let v10 = data[(y1 * w + x0) * c + ch];
        let v11 = data[(y1 * w + x1) * c + ch];
        let top = v00 * (one - fx) + v01 * fx;
        let bottom = v10 * (one - fx) + v11 * fx;
        top * (one - fy) + bottom * fy
    })
}
