//! Raw dense kernels: convolution, pooling, affine maps.
//!
//! Everything here is a plain function of tensors — no tape, no gradients.
//! The autodiff layer wraps these, and the stability tooling drives them as
//! linear operators. Convolutions are cross-correlations (no kernel flip)
//! over NCHW activations with KCHW kernels and zero padding.
//!
//! `conv2d_transpose` is the exact adjoint of `conv2d` for the same
//! geometry: the forward gathers `x[i] * k` into `y[o]`, the transpose
//! scatters `y[o] * k` back into `x[i]` over the identical index set, so
//! `<conv(x), y> == <x, conv_t(y)>` up to float rounding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero-padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad by `(k - 1) / 2` so stride-1 output matches the input size.
    /// Requires odd kernel extents.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

/// Resolved convolution geometry: every index computation below derives from
/// this one struct so forward, adjoint and kernel-gradient stay consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_hw: (usize, usize),
    pub kernel_hw: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize),
    pub out_hw: (usize, usize),
}

impl ConvGeom {
    pub fn new(in_hw: (usize, usize), kernel_hw: (usize, usize), stride: usize, padding: Padding) -> Result<Self> {
        let (h, w) = in_hw;
        let (kh, kw) = kernel_hw;
        if stride == 0 {
            return Err(Error::arg("conv2d", "stride must be >= 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::arg("conv2d", "kernel extents must be >= 1"));
        }
        let pad = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::arg("conv2d", format!("same padding needs odd kernel extents, got {}x{}", kh, kw)));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
            return Err(Error::shape("conv2d", format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad.0, w + 2 * pad.1)));
        }
        let out_hw = ((h + 2 * pad.0 - kh) / stride + 1, (w + 2 * pad.1 - kw) / stride + 1);
        Ok(ConvGeom { in_hw, kernel_hw, stride, pad, out_hw })
    }
}

fn check4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::shape(op, format!("expected rank-4 tensor, got {:?}", s))),
    }
}

/// Cross-correlation of `x: [N, Ci, H, W]` with `k: [Co, Ci, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeom) -> Result<Tensor<T>> {
    let [n, ci, h, w] = check4("conv2d", x)?;
    let [co, kci, kh, kw] = check4("conv2d", k)?;
    if kci != ci {
        return Err(Error::shape("conv2d", format!("input has {} channels, kernel expects {}", ci, kci)));
    }
    if (h, w) != geom.in_hw || (kh, kw) != geom.kernel_hw {
        return Err(Error::shape("conv2d", format!("geometry {:?} does not match x {:?} / k {:?}", geom, x.shape(), k.shape())));
    }
    let (ho, wo) = geom.out_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let xd = x.data();
    let kd = k.data();
    let mut y = Tensor::zeros(&[n, co, ho, wo]);
    let yd = y.data_mut();
    for in_ in 0..n {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for ic in 0..ci {
                        let xb = ((in_ * ci + ic) * h) * w;
                        let kb = ((oc * ci + ic) * kh) * kw;
                        for u in 0..kh {
                            let ih = (oh * s + u) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let iw = (ow * s + v) as isize - pw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += kd[kb + u * kw + v] * xd[xb + ih as usize * w + iw as usize];
                            }
                        }
                    }
                    yd[((in_ * co + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Ok(y)
}

/// Exact adjoint of [`conv2d`]: maps `y: [N, Co, Ho, Wo]` back to the input
/// domain `[N, Ci, H, W]` with the same kernel and geometry.
pub fn conv2d_transpose<T: Scalar>(y: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeom) -> Result<Tensor<T>> {
    let [n, co, ho, wo] = check4("conv2d_transpose", y)?;
    let [kco, ci, kh, kw] = check4("conv2d_transpose", k)?;
    if kco != co {
        return Err(Error::shape("conv2d_transpose", format!("input has {} channels, kernel produces {}", co, kco)));
    }
    if (ho, wo) != geom.out_hw || (kh, kw) != geom.kernel_hw {
        return Err(Error::shape("conv2d_transpose", format!("geometry {:?} does not match y {:?} / k {:?}", geom, y.shape(), k.shape())));
    }
    let (h, w) = geom.in_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let yd = y.data();
    let kd = k.data();
    let mut x = Tensor::zeros(&[n, ci, h, w]);
    let xd = x.data_mut();
    for in_ in 0..n {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = yd[((in_ * co + oc) * ho + oh) * wo + ow];
                    for ic in 0..ci {
                        let xb = ((in_ * ci + ic) * h) * w;
                        let kb = ((oc * ci + ic) * kh) * kw;
                        for u in 0..kh {
                            let ih = (oh * s + u) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let iw = (ow * s + v) as isize - pw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                xd[xb + ih as usize * w + iw as usize] += g * kd[kb + u * kw + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Gradient of a convolution's output w.r.t. its kernel: correlates the
/// input-side tensor with the output-side cotangent. Shared by `conv2d`
/// (x = input, dy = output grad) and `conv2d_transpose` (x = transpose
/// output grad, dy = transpose input), which pair the same index sets.
pub fn conv2d_kernel_grad<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, kernel_shape: &[usize], geom: &ConvGeom) -> Result<Tensor<T>> {
    let [n, ci, h, w] = check4("conv2d_kernel_grad", x)?;
    let [n2, co, ho, wo] = check4("conv2d_kernel_grad", dy)?;
    if n != n2 {
        return Err(Error::shape("conv2d_kernel_grad", format!("batch {} vs {}", n, n2)));
    }
    let (kh, kw) = geom.kernel_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let xd = x.data();
    let gd = dy.data();
    let mut dk = Tensor::zeros(kernel_shape);
    let dkd = dk.data_mut();
    for in_ in 0..n {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = gd[((in_ * co + oc) * ho + oh) * wo + ow];
                    for ic in 0..ci {
                        let xb = ((in_ * ci + ic) * h) * w;
                        let kb = ((oc * ci + ic) * kh) * kw;
                        for u in 0..kh {
                            let ih = (oh * s + u) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let iw = (ow * s + v) as isize - pw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dkd[kb + u * kw + v] += g * xd[xb + ih as usize * w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dk)
}

/// Depthwise cross-correlation: `x: [N, C, H, W]` with `k: [C, 1, kh, kw]`,
/// channel `c` convolved only with kernel slice `c`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeom) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("depthwise_conv2d", x)?;
    let [kc, one, kh, kw] = check4("depthwise_conv2d", k)?;
    if kc != c || one != 1 {
        return Err(Error::shape("depthwise_conv2d", format!("kernel {:?} does not match {} channels", k.shape(), c)));
    }
    if (h, w) != geom.in_hw || (kh, kw) != geom.kernel_hw {
        return Err(Error::shape("depthwise_conv2d", "geometry mismatch".to_string()));
    }
    let (ho, wo) = geom.out_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let xd = x.data();
    let kd = k.data();
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let yd = y.data_mut();
    for in_ in 0..n {
        for ic in 0..c {
            let xb = ((in_ * c + ic) * h) * w;
            let kb = ic * kh * kw;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for u in 0..kh {
                        let ih = (oh * s + u) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let iw = (ow * s + v) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc += kd[kb + u * kw + v] * xd[xb + ih as usize * w + iw as usize];
                        }
                    }
                    yd[((in_ * c + ic) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Ok(y)
}

/// Exact adjoint of [`depthwise_conv2d`].
pub fn depthwise_conv2d_transpose<T: Scalar>(y: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeom) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = check4("depthwise_conv2d_transpose", y)?;
    let [kc, one, kh, kw] = check4("depthwise_conv2d_transpose", k)?;
    if kc != c || one != 1 {
        return Err(Error::shape("depthwise_conv2d_transpose", format!("kernel {:?} does not match {} channels", k.shape(), c)));
    }
    if (ho, wo) != geom.out_hw || (kh, kw) != geom.kernel_hw {
        return Err(Error::shape("depthwise_conv2d_transpose", "geometry mismatch".to_string()));
    }
    let (h, w) = geom.in_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let yd = y.data();
    let kd = k.data();
    let mut x = Tensor::zeros(&[n, c, h, w]);
    let xd = x.data_mut();
    for in_ in 0..n {
        for ic in 0..c {
            let xb = ((in_ * c + ic) * h) * w;
            let kb = ic * kh * kw;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = yd[((in_ * c + ic) * ho + oh) * wo + ow];
                    for u in 0..kh {
                        let ih = (oh * s + u) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let iw = (ow * s + v) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xd[xb + ih as usize * w + iw as usize] += g * kd[kb + u * kw + v];
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Kernel gradient for the depthwise pair, analogous to
/// [`conv2d_kernel_grad`].
pub fn depthwise_kernel_grad<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, kernel_shape: &[usize], geom: &ConvGeom) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("depthwise_kernel_grad", x)?;
    let [_, _, ho, wo] = check4("depthwise_kernel_grad", dy)?;
    let (kh, kw) = geom.kernel_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let xd = x.data();
    let gd = dy.data();
    let mut dk = Tensor::zeros(kernel_shape);
    let dkd = dk.data_mut();
    for in_ in 0..n {
        for ic in 0..c {
            let xb = ((in_ * c + ic) * h) * w;
            let kb = ic * kh * kw;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = gd[((in_ * c + ic) * ho + oh) * wo + ow];
                    for u in 0..kh {
                        let ih = (oh * s + u) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let iw = (ow * s + v) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            dkd[kb + u * kw + v] += g * xd[xb + ih as usize * w + iw as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(dk)
}

/// 2x2 average pooling with stride 2; trailing odd rows/columns are dropped.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("avg_pool2", x)?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape("avg_pool2", format!("input {}x{} too small for a 2x2 window", h, w)));
    }
    let quarter = T::of(0.25);
    let xd = x.data();
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let yd = y.data_mut();
    for in_ in 0..n {
        for ic in 0..c {
            let xb = ((in_ * c + ic) * h) * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = xb + (2 * oh) * w + 2 * ow;
                    let s = xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1];
                    yd[((in_ * c + ic) * ho + oh) * wo + ow] = s * quarter;
                }
            }
        }
    }
    Ok(y)
}

/// Exact adjoint of [`avg_pool2`]: spreads each pooled value back over its
/// 2x2 window with weight 1/4 (dropped tail cells receive zero).
pub fn avg_pool2_adjoint<T: Scalar>(y: &Tensor<T>, in_hw: (usize, usize)) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = check4("avg_pool2_adjoint", y)?;
    let (h, w) = in_hw;
    if ho != h / 2 || wo != w / 2 {
        return Err(Error::shape("avg_pool2_adjoint", format!("pooled {}x{} does not match input {}x{}", ho, wo, h, w)));
    }
    let quarter = T::of(0.25);
    let yd = y.data();
    let mut x = Tensor::zeros(&[n, c, h, w]);
    let xd = x.data_mut();
    for in_ in 0..n {
        for ic in 0..c {
            let xb = ((in_ * c + ic) * h) * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = yd[((in_ * c + ic) * ho + oh) * wo + ow] * quarter;
                    let base = xb + (2 * oh) * w + 2 * ow;
                    xd[base] += g;
                    xd[base + 1] += g;
                    xd[base + w] += g;
                    xd[base + w + 1] += g;
                }
            }
        }
    }
    Ok(x)
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("global_avg_pool", x)?;
    let inv = T::one() / T::of((h * w) as f64);
    let xd = x.data();
    let mut y = Tensor::zeros(&[n, c]);
    let yd = y.data_mut();
    for in_ in 0..n {
        for ic in 0..c {
            let xb = ((in_ * c + ic) * h) * w;
            let mut acc = T::zero();
            for i in 0..h * w {
                acc += xd[xb + i];
            }
            yd[in_ * c + ic] = acc * inv;
        }
    }
    Ok(y)
}

/// Affine map `y[n, o] = sum_f x[n, f] * w[o, f] + b[o]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, f) = match x.shape() {
        &[n, f] => (n, f),
        s => return Err(Error::shape("linear", format!("expected rank-2 input, got {:?}", s))),
    };
    let (o, fw) = match w.shape() {
        &[o, fw] => (o, fw),
        s => return Err(Error::shape("linear", format!("expected rank-2 weight, got {:?}", s))),
    };
    if f != fw {
        return Err(Error::shape("linear", format!("input features {} vs weight features {}", f, fw)));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(Error::shape("linear", format!("bias {:?} does not match {} outputs", b.shape(), o)));
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut y = Tensor::zeros(&[n, o]);
    let yd = y.data_mut();
    for in_ in 0..n {
        for io in 0..o {
            let mut acc = T::zero();
            for i in 0..f {
                acc += xd[in_ * f + i] * wd[io * f + i];
            }
            if let Some(b) = b {
                acc += b.data()[io];
            }
            yd[in_ * o + io] = acc;
        }
    }
    Ok(y)
}

/// Feature mixing for graph layers: multiplies row features by `m: [O, I]`
/// (or its transpose), i.e. `y[r, o] = sum_i x[r, i] * m[o, i]`.
///
/// With `transpose = true` the same storage is read as `m^T`, so a layer
/// holding one matrix can apply both the operator and its adjoint; summation
/// order over the contracted index is identical either way, which keeps
/// `apply(m, T) == apply(materialized m^T, no-T)` bit-for-bit.
pub fn feature_matmul<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>, transpose: bool) -> Result<Tensor<T>> {
    let (r, fin) = match x.shape() {
        &[r, f] => (r, f),
        s => return Err(Error::shape("feature_matmul", format!("expected rank-2 input, got {:?}", s))),
    };
    let (mo, mi) = match m.shape() {
        &[o, i] => (o, i),
        s => return Err(Error::shape("feature_matmul", format!("expected rank-2 matrix, got {:?}", s))),
    };
    let (contract, out) = if transpose { (mo, mi) } else { (mi, mo) };
    if fin != contract {
        return Err(Error::shape("feature_matmul", format!("input features {} vs matrix contraction {}", fin, contract)));
    }
    let xd = x.data();
    let md = m.data();
    let mut y = Tensor::zeros(&[r, out]);
    let yd = y.data_mut();
    for ir in 0..r {
        for io in 0..out {
            let mut acc = T::zero();
            for i in 0..contract {
                let mv = if transpose { md[i * mi + io] } else { md[io * mi + i] };
                acc += xd[ir * fin + i] * mv;
            }
            yd[ir * out + io] = acc;
        }
    }
    Ok(y)
}

/// Standardizes a tensor to zero mean and unit spread:
/// `(w - mean) / (std + 1e-6)` with population statistics over every
/// element, recomputed on each call. Returns the standard deviation too so
/// gradient code can reuse it.
pub fn normalize_weights_stats<T: Scalar>(w: &Tensor<T>) -> Result<(Tensor<T>, T)> {
    if w.numel() < 2 {
        return Err(Error::arg("normalize_weights", "needs at least 2 elements for a standard deviation"));
    }
    let n = T::of(w.numel() as f64);
    let mu = w.sum() / n;
    let var = w.data().iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    let sigma = var.sqrt();
    let denom = sigma + T::of(1e-6);
    Ok((w.map(|v| (v - mu) / denom), sigma))
}

/// Concatenates along the channel axis of NCHW tensors.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = check4("concat_channels", a)?;
    let [n2, cb, h2, w2] = check4("concat_channels", b)?;
    if n != n2 || h != h2 || w != w2 {
        return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut y = Tensor::zeros(&[n, ca + cb, h, w]);
    let yd = y.data_mut();
    let hw = h * w;
    for in_ in 0..n {
        let dst = in_ * (ca + cb) * hw;
        yd[dst..dst + ca * hw].copy_from_slice(&a.data()[in_ * ca * hw..(in_ + 1) * ca * hw]);
        yd[dst + ca * hw..dst + (ca + cb) * hw].copy_from_slice(&b.data()[in_ * cb * hw..(in_ + 1) * cb * hw]);
    }
    Ok(y)
}

/// Takes the first `count` channels of an NCHW tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, count: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("slice_channels", x)?;
    if count > c {
        return Err(Error::shape("slice_channels", format!("asked for {} of {} channels", count, c)));
    }
    let hw = h * w;
    let mut y = Tensor::zeros(&[n, count, h, w]);
    let yd = y.data_mut();
    for in_ in 0..n {
        let src = in_ * c * hw;
        yd[in_ * count * hw..(in_ + 1) * count * hw].copy_from_slice(&x.data()[src..src + count * hw]);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn valid_conv_matches_hand_example() {
        // Correlating [1, 2, 3] with [-1, 1] over the valid region slides the
        // kernel twice: [2 - 1, 3 - 2] = [1, 1].
        let x = t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]);
        let k = t(&[1, 1, 1, 2], &[-1.0, 1.0]);
        let geom = ConvGeom::new((1, 3), (1, 2), 1, Padding::Valid).unwrap();
        let y = conv2d(&x, &k, &geom).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[1.0, 1.0]);
    }

    #[test]
    fn same_padding_preserves_size_and_pads_with_zero() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        // 3x3 averaging-style kernel of ones: corners see only the 2x2 block.
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let geom = ConvGeom::new((2, 2), (3, 3), 1, Padding::Same).unwrap();
        let y = conv2d(&x, &k, &geom).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn same_padding_rejects_even_kernels() {
        assert!(ConvGeom::new((4, 4), (2, 2), 1, Padding::Same).is_err());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let geom = ConvGeom::new((4, 4), (3, 3), 1, Padding::Same).unwrap();
        assert!(conv2d(&x, &k, &geom).is_err());
    }

    #[test]
    fn transpose_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, padding) in &[(1usize, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
            let geom = ConvGeom::new((7, 6), (3, 3), stride, padding).unwrap();
            let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
            let (ho, wo) = geom.out_hw;
            let y = Tensor::<f64>::randn(&[2, 4, ho, wo], 1.0, &mut rng);
            let lhs = conv2d(&x, &k, &geom).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&conv2d_transpose(&y, &k, &geom).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "stride {} {:?}: {} vs {}", stride, padding, lhs, rhs);
        }
    }

    #[test]
    fn depthwise_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let geom = ConvGeom::new((6, 6), (3, 3), 1, Padding::Same).unwrap();
        let x = Tensor::<f64>::randn(&[2, 5, 6, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 1, 3, 3], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[2, 5, 6, 6], 1.0, &mut rng);
        let lhs = depthwise_conv2d(&x, &k, &geom).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&depthwise_conv2d_transpose(&y, &k, &geom).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn avg_pool_averages_windows_and_adjoint_matches() {
        let x = t(&[1, 1, 2, 4], &[1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[2.5, 6.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 7], 1.0, &mut rng); // odd extents exercise the dropped tail
        let y = Tensor::<f64>::randn(&[2, 3, 2, 3], 1.0, &mut rng);
        let lhs = avg_pool2(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&avg_pool2_adjoint(&y, (5, 7)).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn feature_matmul_transpose_reads_same_storage() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = t(&[2, 3], &[1.0, 0.0, -1.0, 2.0, 1.0, 0.0]);
        let y = feature_matmul(&x, &m, false).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[-2.0, 4.0, -2.0, 13.0]);
        // Applying m then m^T equals multiplying by the 3x3 Gram matrix.
        let back = feature_matmul(&y, &m, true).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
        assert_eq!(slice_channels(&y, 3).unwrap(), a);
    }
}
