//! Uniform fake quantization with learnable clip scales.
//!
//! The grid for `b` bits over `[0, 1]` is `round((2^b - 1) t) / (2^b - 1)`;
//! ties round away from zero, matching integer rescaling exactly. Weights
//! are standardized, clipped to `[-alpha, alpha]` and placed on the signed
//! sub-grid with `2^(b-1) - 1` steps per side; activations are clipped to
//! `[0, alpha]` and use all `2^b - 1` steps. Both directions of the
//! float <-> integer conversion evaluate the identical expression
//! `alpha * (n / levels)`, which is what makes round-trips bit-exact.
//!
//! Backward passes use the straight-through estimator: the cotangent passes
//! unchanged inside the clip range and is dropped outside, while the clip
//! scale receives the saturating casewise gradient (see [`alpha_gradient`]).

use std::rc::Rc;

use crate::autograd::{CustomVjp, Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to every learnable clip scale; optimizer steps project back
/// above it so the quantizer stays well-defined.
pub const ALPHA_FLOOR: f64 = 1e-6;

/// Number of grid steps on each side of zero (`signed`) or in total
/// (`unsigned`). Bit widths below 2 leave no room for a signed grid.
pub fn levels(bits: u32, signed: bool) -> Result<u32> {
    if !(2..=30).contains(&bits) {
        return Err(Error::arg("levels", format!("bit width must be in 2..=30, got {}", bits)));
    }
    Ok(if signed { (1u32 << (bits - 1)) - 1 } else { (1u32 << bits) - 1 })
}

/// Snaps `t` (expected in `[0, 1]`) to the `bits`-wide grid over the unit
/// interval.
pub fn quantize_pointwise<T: Scalar>(t: T, bits: u32) -> Result<T> {
    let r = T::of(levels(bits, false)? as f64);
    debug_assert!(t >= T::zero() && t <= T::one(), "quantize_pointwise input outside [0, 1]");
    Ok((t * r).round() / r)
}

/// Signed fake quantization for (standardized) weights:
/// `alpha * round(clip(w / alpha, -1, 1) * R) / R` with `R = 2^(bits-1) - 1`.
pub fn fake_quant_weights<T: Scalar>(w: &Tensor<T>, alpha: T, bits: u32) -> Result<Tensor<T>> {
    if alpha <= T::zero() {
        return Err(Error::NonPositiveAlpha { alpha: alpha.as_f64() });
    }
    let r = T::of(levels(bits, true)? as f64);
    Ok(w.map(|v| {
        let t = (v / alpha).max(-T::one()).min(T::one());
        alpha * ((t * r).round() / r)
    }))
}

/// Unsigned fake quantization for post-activation values:
/// `alpha * round(clip(x / alpha, 0, 1) * R) / R` with `R = 2^bits - 1`.
pub fn fake_quant_activations<T: Scalar>(x: &Tensor<T>, alpha: T, bits: u32) -> Result<Tensor<T>> {
    if alpha <= T::zero() {
        return Err(Error::NonPositiveAlpha { alpha: alpha.as_f64() });
    }
    let r = T::of(levels(bits, false)? as f64);
    Ok(x.map(|v| {
        let t = (v / alpha).max(T::zero()).min(T::one());
        alpha * ((t * r).round() / r)
    }))
}

/// Casewise gradient of a fake-quantized value w.r.t. its clip scale.
///
/// Saturated entries move with the clip edge (+/-1), interior entries
/// contribute the residual slope `(x_q - x) / alpha`. For unsigned grids the
/// lower edge is 0, so entries at or below it contribute nothing.
pub fn alpha_gradient<T: Scalar>(x: T, x_q: T, alpha: T, signed: bool) -> Result<T> {
    if alpha <= T::zero() {
        return Err(Error::NonPositiveAlpha { alpha: alpha.as_f64() });
    }
    Ok(if x >= alpha {
        T::one()
    } else if signed && x <= -alpha {
        -T::one()
    } else if !signed && x <= T::zero() {
        T::zero()
    } else {
        (x_q - x) / alpha
    })
}

/// Standardizes a weight tensor to zero mean and unit spread; see
/// [`ops::normalize_weights_stats`] for the exact formula.
pub fn normalize_weights<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ops::normalize_weights_stats(w)?.0)
}

/// Mean squared error between two same-shape tensors.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = T::of(a.numel() as f64);
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n)
}

// ── integer grid transport ──────────────────────────────────────────────

/// A tensor stored as grid indices plus the scale that reconstructs it.
/// Reconstruction is `alpha * (value / levels)`; conversion is `f64`-only
/// because the 1e-9 grid tolerance is meaningless at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Vec<i32>,
    pub shape: Vec<usize>,
    pub bits: u32,
    pub signed: bool,
    pub alpha: f64,
}

impl QuantizedTensor {
    pub fn levels(&self) -> u32 {
        levels(self.bits, self.signed).expect("validated at construction")
    }
}

/// Converts an on-grid tensor to integer grid indices. Inputs farther than
/// `1e-9 * alpha` from their nearest grid point are rejected: that distance
/// signals the values were produced with a different scale or bit width.
pub fn to_integer(x: &Tensor<f64>, alpha: f64, bits: u32, signed: bool, name: &str) -> Result<QuantizedTensor> {
    if alpha <= 0.0 {
        return Err(Error::NonPositiveAlpha { alpha });
    }
    let r = levels(bits, signed)? as f64;
    let lo = if signed { -r } else { 0.0 };
    let mut values = Vec::with_capacity(x.numel());
    for &v in x.data() {
        let n = (v / alpha * r).round();
        let dist = (v - alpha * (n / r)).abs();
        if dist > 1e-9 * alpha || n < lo || n > r {
            return Err(Error::OffGrid { name: name.to_string(), value: v, bits, distance: dist });
        }
        values.push(n as i32);
    }
    Ok(QuantizedTensor { values, shape: x.shape().to_vec(), bits, signed, alpha })
}

/// Reconstructs the float tensor from grid indices; exact inverse of
/// [`to_integer`] (same reconstruction expression, so bit-exact).
pub fn from_integer(q: &QuantizedTensor) -> Result<Tensor<f64>> {
    let r = q.levels() as f64;
    let data = q.values.iter().map(|&n| q.alpha * (n as f64 / r)).collect();
    Tensor::new(q.shape.clone(), data)
}

// ── learnable quantizer state ───────────────────────────────────────────

/// One fake-quantization site: bit width, signedness, and a learnable clip
/// scale. Activation sites defer scale initialization to the first batch
/// they observe (99.9th percentile of absolute values); weight sites
/// initialize from the standardized weights they will clip.
#[derive(Debug, Clone)]
pub struct Quantizer<T: Scalar> {
    pub bits: u32,
    pub signed: bool,
    pub enabled: bool,
    /// Shape `[1]`; registered as a trainable parameter on every forward.
    pub alpha: Tensor<T>,
    pub initialized: bool,
}

impl<T: Scalar> Quantizer<T> {
    /// Weight-site quantizer; `alpha` starts at the largest standardized
    /// magnitude so the initial grid covers every weight.
    pub fn for_weights(bits: u32, w: &Tensor<T>) -> Result<Self> {
        levels(bits, true)?;
        let normed = normalize_weights(w)?;
        let mut a = normed.max_abs();
        if a <= T::of(ALPHA_FLOOR) {
            a = T::one();
        }
        Ok(Quantizer { bits, signed: true, enabled: true, alpha: Tensor::scalar(a), initialized: true })
    }

    /// Activation-site quantizer with deferred scale initialization.
    pub fn for_activations(bits: u32, signed: bool) -> Result<Self> {
        levels(bits, signed)?;
        Ok(Quantizer { bits, signed, enabled: true, alpha: Tensor::scalar(T::one()), initialized: false })
    }

    pub fn alpha_value(&self) -> T {
        self.alpha.data()[0]
    }

    /// First-batch calibration: 99.9th percentile of |values| by nearest
    /// rank, floored at [`ALPHA_FLOOR`]. No-op once initialized.
    pub fn init_from_batch(&mut self, values: &Tensor<T>) {
        if self.initialized {
            return;
        }
        let mut mags: Vec<T> = values.data().iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).expect("finite activations"));
        let idx = ((mags.len() as f64 * 0.999).ceil() as usize).clamp(1, mags.len()) - 1;
        let mut a = mags[idx];
        if a <= T::of(ALPHA_FLOOR) {
            a = T::one();
        }
        self.alpha = Tensor::scalar(a);
        self.initialized = true;
    }
}

// ── straight-through tape integration ───────────────────────────────────

struct SteRule {
    signed: bool,
}

impl<T: Scalar> CustomVjp<T> for SteRule {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let alpha = inputs[1].data()[0];
        let lo = if self.signed { -alpha } else { T::zero() };
        // Input grad: identity strictly inside the clip range, zero at and
        // beyond the saturated edges.
        let mut dx = Tensor::zeros(x.shape());
        let mut dalpha = T::zero();
        for i in 0..x.numel() {
            let xv = x.data()[i];
            let gv = g.data()[i];
            if xv > lo && xv < alpha {
                dx.data_mut()[i] = gv;
            }
            let case = alpha_gradient(xv, output.data()[i], alpha, self.signed).expect("alpha validated at forward");
            dalpha += gv * case;
        }
        vec![Some(dx), Some(Tensor::scalar(dalpha))]
    }
}

/// Records a fake-quantization node with straight-through backward. `alpha`
/// must be a scalar variable (typically a registered parameter).
pub fn fake_quant_var<T: Scalar>(tape: &Tape<T>, x: Var, alpha: Var, bits: u32, signed: bool) -> Result<Var> {
    if tape.shape(alpha) != [1] {
        return Err(Error::shape("fake_quant", format!("alpha must be a scalar, got {:?}", tape.shape(alpha))));
    }
    let a = tape.value(alpha).item()?;
    let y = if signed {
        fake_quant_weights(&tape.value(x), a, bits)?
    } else {
        fake_quant_activations(&tape.value(x), a, bits)?
    };
    Ok(tape.custom(&[x, alpha], y, Rc::new(SteRule { signed })))
}
