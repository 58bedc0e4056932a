//! Reverse-mode autodiff on a Wengert tape.
//!
//! A [`Tape`] records one forward pass as a list of nodes; [`Var`] is an
//! index into that list. Parents always precede children, so a single
//! reverse sweep over ids is a reverse-topological traversal. Each op stores
//! exactly the metadata its vector-Jacobian product needs; values of parents
//! stay available on the tape, so almost nothing is saved twice.
//!
//! Ops with non-standard gradients (the straight-through quantizer
//! estimators) go through the [`CustomVjp`] escape hatch: the forward value
//! is computed by the caller and the registered rule supplies the backward.
//!
//! The tape is single-threaded by design (`RefCell`, not locks): one
//! training step builds one tape, calls [`Tape::backward`] once, and drops
//! it. Parameters live outside the tape and are re-registered every step.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule for ops the built-in set cannot express (gradient does not
/// match the true derivative of the forward map, e.g. straight-through
/// estimators).
pub trait CustomVjp<T: Scalar> {
    /// Returns one cotangent per input (or `None` where no gradient flows).
    /// `inputs` are the forward input values, `output` the forward result.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, out_grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: T },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ConvT2d { y: Var, k: Var, geom: ConvGeom },
    Depthwise { x: Var, k: Var, geom: ConvGeom },
    DepthwiseT { y: Var, k: Var, geom: ConvGeom },
    AvgPool { x: Var, in_hw: (usize, usize) },
    GlobalAvgPool { x: Var, in_hw: (usize, usize) },
    Linear { x: Var, w: Var, b: Option<Var> },
    FeatureMatmul { x: Var, m: Var, transpose: bool },
    ConcatC { a: Var, b: Var, split: usize },
    SliceC { x: Var, count: usize },
    Sum { x: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>>, mask: Option<Rc<Vec<bool>>> },
    TvNorm { x: Var },
    TvSmooth { x: Var, gamma: Var, eps: T },
    WeightNorm { w: Var, sigma: T },
    Custom { inputs: Vec<Var>, rule: Rc<dyn CustomVjp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a node. The returned borrow must be dropped before recording
    /// further ops; clone it for anything longer-lived.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // Non-finite values are allowed on the tape: training watches the loss
    // and reports divergence as an error, which requires NaN to propagate.
    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Registers a tensor that does not require gradients (inputs, labels).
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a trainable leaf; [`Tape::backward`] will produce its
    /// gradient.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    // ── elementwise and structural ops ──────────────────────────────────

    pub fn relu(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu { x }, self.needs(x))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(&self.value(b), "add", |x, z| x + z)?;
        Ok(self.push(y, Op::Add { a, b }, self.needs(a) || self.needs(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(&self.value(b), "sub", |x, z| x - z)?;
        Ok(self.push(y, Op::Sub { a, b }, self.needs(a) || self.needs(b)))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale { x, c }, self.needs(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, self.needs(x))
    }

    // ── convolution family ──────────────────────────────────────────────

    /// Cross-correlation with zero padding; `k` is `[Co, Ci, kh, kw]`.
    pub fn conv2d(&self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = {
            let xs = self.shape(x);
            let ks = self.shape(k);
            if xs.len() != 4 || ks.len() != 4 {
                return Err(Error::shape("conv2d", format!("x {:?}, k {:?}", xs, ks)));
            }
            ConvGeom::new((xs[2], xs[3]), (ks[2], ks[3]), stride, padding)?
        };
        self.conv2d_with_geom(x, k, geom)
    }

    pub fn conv2d_with_geom(&self, x: Var, k: Var, geom: ConvGeom) -> Result<Var> {
        let y = ops::conv2d(&self.value(x), &self.value(k), &geom)?;
        Ok(self.push(y, Op::Conv2d { x, k, geom }, self.needs(x) || self.needs(k)))
    }

    /// Adjoint of [`Tape::conv2d`] for the same kernel and geometry; maps an
    /// output-shaped tensor back to the input shape.
    pub fn conv2d_transpose(&self, y: Var, k: Var, geom: ConvGeom) -> Result<Var> {
        let x = ops::conv2d_transpose(&self.value(y), &self.value(k), &geom)?;
        Ok(self.push(x, Op::ConvT2d { y, k, geom }, self.needs(y) || self.needs(k)))
    }

    pub fn depthwise_conv2d(&self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let geom = {
            let xs = self.shape(x);
            let ks = self.shape(k);
            if xs.len() != 4 || ks.len() != 4 {
                return Err(Error::shape("depthwise_conv2d", format!("x {:?}, k {:?}", xs, ks)));
            }
            ConvGeom::new((xs[2], xs[3]), (ks[2], ks[3]), 1, padding)?
        };
        let y = ops::depthwise_conv2d(&self.value(x), &self.value(k), &geom)?;
        Ok(self.push(y, Op::Depthwise { x, k, geom }, self.needs(x) || self.needs(k)))
    }

    pub fn depthwise_conv2d_transpose(&self, y: Var, k: Var, geom: ConvGeom) -> Result<Var> {
        let x = ops::depthwise_conv2d_transpose(&self.value(y), &self.value(k), &geom)?;
        Ok(self.push(x, Op::DepthwiseT { y, k, geom }, self.needs(y) || self.needs(k)))
    }

    // ── pooling and heads ───────────────────────────────────────────────

    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let in_hw = {
            let s = self.shape(x);
            if s.len() != 4 {
                return Err(Error::shape("avg_pool2", format!("{:?}", s)));
            }
            (s[2], s[3])
        };
        let y = ops::avg_pool2(&self.value(x))?;
        Ok(self.push(y, Op::AvgPool { x, in_hw }, self.needs(x)))
    }

    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let in_hw = {
            let s = self.shape(x);
            if s.len() != 4 {
                return Err(Error::shape("global_avg_pool", format!("{:?}", s)));
            }
            (s[2], s[3])
        };
        let y = ops::global_avg_pool(&self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x, in_hw }, self.needs(x)))
    }

    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bv = b.map(|v| self.value(v).clone());
        let y = ops::linear(&self.value(x), &self.value(w), bv.as_ref())?;
        let needs = self.needs(x) || self.needs(w) || b.map(|v| self.needs(v)).unwrap_or(false);
        Ok(self.push(y, Op::Linear { x, w, b }, needs))
    }

    pub fn feature_matmul(&self, x: Var, m: Var, transpose: bool) -> Result<Var> {
        let y = ops::feature_matmul(&self.value(x), &self.value(m), transpose)?;
        Ok(self.push(y, Op::FeatureMatmul { x, m, transpose }, self.needs(x) || self.needs(m)))
    }

    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let split = {
            let s = self.shape(a);
            if s.len() != 4 {
                return Err(Error::shape("concat_channels", format!("{:?}", s)));
            }
            s[1]
        };
        let y = ops::concat_channels(&self.value(a), &self.value(b))?;
        Ok(self.push(y, Op::ConcatC { a, b, split }, self.needs(a) || self.needs(b)))
    }

    pub fn slice_channels(&self, x: Var, count: usize) -> Result<Var> {
        let y = ops::slice_channels(&self.value(x), count)?;
        Ok(self.push(y, Op::SliceC { x, count }, self.needs(x)))
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Mean squared error between two same-shape tensors (scalar output).
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let n = T::of(av.numel() as f64);
        let sum: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(sum / n);
        drop(av);
        drop(bv);
        Ok(self.push(v, Op::Mse { a, b }, self.needs(a) || self.needs(b)))
    }

    /// Mean cross-entropy of `logits: [N, C]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: Rc<Vec<usize>>) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, None)
    }

    /// Cross-entropy averaged over the rows where `mask` is true; rows
    /// outside the mask contribute neither loss nor gradient.
    pub fn masked_cross_entropy(&self, logits: Var, labels: Rc<Vec<usize>>, mask: Rc<Vec<bool>>) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, Some(mask))
    }

    fn cross_entropy_impl(&self, logits: Var, labels: Rc<Vec<usize>>, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let (n, c) = {
            let s = self.shape(logits);
            match s.as_slice() {
                &[n, c] => (n, c),
                _ => return Err(Error::shape("cross_entropy", format!("expected [N, C] logits, got {:?}", s))),
            }
        };
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} labels for {} rows", labels.len(), n)));
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(Error::shape("cross_entropy", format!("{} mask entries for {} rows", m.len(), n)));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::arg("cross_entropy", "mask selects no rows"));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::arg("cross_entropy", format!("label {} out of range for {} classes", bad, c)));
        }
        let lv = self.value(logits);
        let counted = |row: usize| mask.as_ref().map(|m| m[row]).unwrap_or(true);
        let count = (0..n).filter(|&r| counted(r)).count();
        let mut total = T::zero();
        for row in 0..n {
            if !counted(row) {
                continue;
            }
            let r = &lv.data()[row * c..(row + 1) * c];
            let m = r.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + r.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - r[labels[row]];
        }
        let v = Tensor::scalar(total / T::of(count as f64));
        drop(lv);
        Ok(self.push(v, Op::CrossEntropy { logits, labels, mask }, self.needs(logits)))
    }

    // ── smoothing ───────────────────────────────────────────────────────

    /// Anisotropic total variation of an NCHW tensor: the summed absolute
    /// forward differences along both spatial axes (scalar output).
    pub fn tv_norm(&self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(tv_norm_value(&self.value(x))?);
        Ok(self.push(v, Op::TvNorm { x }, self.needs(x)))
    }

    /// One reweighted smoothing step `x - gamma^2 * (Dx + Dy) x`, where each
    /// `D` is a graph Laplacian over forward differences with edge weights
    /// `1 / (|difference| + eps)`. Weights are recomputed from the current
    /// input, boundaries are reflecting (no wraparound), and the step is
    /// differentiable in both `x` and the scalar `gamma`.
    pub fn tv_smooth(&self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        if self.shape(gamma) != [1] {
            return Err(Error::shape("tv_smooth", format!("gamma must be a scalar, got {:?}", self.shape(gamma))));
        }
        if eps <= T::zero() {
            return Err(Error::arg("tv_smooth", "eps must be strictly positive"));
        }
        let g = self.value(gamma).item()?;
        let y = tv_smooth_value(&self.value(x), g, eps)?;
        Ok(self.push(y, Op::TvSmooth { x, gamma, eps }, self.needs(x) || self.needs(gamma)))
    }

    /// Standardizes a weight tensor: `(w - mean) / (std + 1e-6)`, statistics
    /// over the whole tensor, recomputed on every call.
    pub fn weight_normalize(&self, w: Var) -> Result<Var> {
        let (y, sigma) = ops::normalize_weights_stats(&self.value(w))?;
        Ok(self.push(y, Op::WeightNorm { w, sigma }, self.needs(w)))
    }

    // ── custom-gradient escape hatch ────────────────────────────────────

    /// Records a node whose forward value was computed by the caller and
    /// whose backward is delegated to `rule` (see [`CustomVjp`]). This is
    /// how straight-through estimators enter the tape.
    pub fn custom(&self, inputs: &[Var], value: Tensor<T>, rule: Rc<dyn CustomVjp<T>>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradient store; leaves
    /// registered with [`Tape::param`] are guaranteed an entry (zero if the
    /// loss does not depend on them).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss { elements: nodes[loss.0].value.numel() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &nodes[id].value;
            let give = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, delta: Tensor<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_scaled(&delta, T::one()),
                    slot => *slot = Some(delta),
                }
            };
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for the caller
                    continue;
                }
                Op::Relu { x } => {
                    let d = g.zip_map(&nodes[x.0].value, "relu_bwd", |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                    give(&mut grads, *x, d);
                }
                Op::Add { a, b } => {
                    give(&mut grads, *a, g.clone());
                    give(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    give(&mut grads, *a, g.clone());
                    give(&mut grads, *b, g.map(|v| -v));
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    give(&mut grads, *x, g.map(|v| v * c));
                }
                Op::Conv2d { x, k, geom } => {
                    if nodes[x.0].needs_grad {
                        give(&mut grads, *x, ops::conv2d_transpose(&g, &nodes[k.0].value, geom)?);
                    }
                    if nodes[k.0].needs_grad {
                        let dk = ops::conv2d_kernel_grad(&nodes[x.0].value, &g, nodes[k.0].value.shape(), geom)?;
                        give(&mut grads, *k, dk);
                    }
                }
                Op::ConvT2d { y, k, geom } => {
                    if nodes[y.0].needs_grad {
                        give(&mut grads, *y, ops::conv2d(&g, &nodes[k.0].value, geom)?);
                    }
                    if nodes[k.0].needs_grad {
                        let dk = ops::conv2d_kernel_grad(&g, &nodes[y.0].value, nodes[k.0].value.shape(), geom)?;
                        give(&mut grads, *k, dk);
                    }
                }
                Op::Depthwise { x, k, geom } => {
                    if nodes[x.0].needs_grad {
                        give(&mut grads, *x, ops::depthwise_conv2d_transpose(&g, &nodes[k.0].value, geom)?);
                    }
                    if nodes[k.0].needs_grad {
                        let dk = ops::depthwise_kernel_grad(&nodes[x.0].value, &g, nodes[k.0].value.shape(), geom)?;
                        give(&mut grads, *k, dk);
                    }
                }
                Op::DepthwiseT { y, k, geom } => {
                    if nodes[y.0].needs_grad {
                        give(&mut grads, *y, ops::depthwise_conv2d(&g, &nodes[k.0].value, geom)?);
                    }
                    if nodes[k.0].needs_grad {
                        let dk = ops::depthwise_kernel_grad(&g, &nodes[y.0].value, nodes[k.0].value.shape(), geom)?;
                        give(&mut grads, *k, dk);
                    }
                }
                Op::AvgPool { x, in_hw } => {
                    give(&mut grads, *x, ops::avg_pool2_adjoint(&g, *in_hw)?);
                }
                Op::GlobalAvgPool { x, in_hw } => {
                    let (h, w) = *in_hw;
                    let inv = T::one() / T::of((h * w) as f64);
                    let xs = nodes[x.0].value.shape().to_vec();
                    let mut dx = Tensor::zeros(&xs);
                    let gd = g.data();
                    let dd = dx.data_mut();
                    let hw = h * w;
                    for nc in 0..xs[0] * xs[1] {
                        let gv = gd[nc] * inv;
                        for i in 0..hw {
                            dd[nc * hw + i] = gv;
                        }
                    }
                    give(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    if nodes[x.0].needs_grad {
                        give(&mut grads, *x, ops::feature_matmul(&g, &nodes[w.0].value, true)?);
                    }
                    if nodes[w.0].needs_grad {
                        let xv = &nodes[x.0].value;
                        let (n, f) = (xv.shape()[0], xv.shape()[1]);
                        let o = g.shape()[1];
                        let mut dw = Tensor::zeros(&[o, f]);
                        let dwd = dw.data_mut();
                        for in_ in 0..n {
                            for io in 0..o {
                                let gv = g.data()[in_ * o + io];
                                for i in 0..f {
                                    dwd[io * f + i] += gv * xv.data()[in_ * f + i];
                                }
                            }
                        }
                        give(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if nodes[b.0].needs_grad {
                            let (n, o) = (g.shape()[0], g.shape()[1]);
                            let mut db = Tensor::zeros(&[o]);
                            for in_ in 0..n {
                                for io in 0..o {
                                    db.data_mut()[io] += g.data()[in_ * o + io];
                                }
                            }
                            give(&mut grads, *b, db);
                        }
                    }
                }
                Op::FeatureMatmul { x, m, transpose } => {
                    if nodes[x.0].needs_grad {
                        give(&mut grads, *x, ops::feature_matmul(&g, &nodes[m.0].value, !transpose)?);
                    }
                    if nodes[m.0].needs_grad {
                        let xv = &nodes[x.0].value;
                        let ms = nodes[m.0].value.shape().to_vec();
                        let (rows, fin) = (xv.shape()[0], xv.shape()[1]);
                        let out = g.shape()[1];
                        let mut dm = Tensor::zeros(&ms);
                        let dmd = dm.data_mut();
                        for r in 0..rows {
                            for io in 0..out {
                                let gv = g.data()[r * out + io];
                                for i in 0..fin {
                                    // y = x m^T when transpose=false: dm[o][i] += g[r][o] x[r][i]
                                    // y = x m   when transpose=true : dm[i][o] += x[r][i] g[r][o]
                                    let idx = if *transpose { i * ms[1] + io } else { io * ms[1] + i };
                                    dmd[idx] += gv * xv.data()[r * fin + i];
                                }
                            }
                        }
                        give(&mut grads, *m, dm);
                    }
                }
                Op::ConcatC { a, b, split } => {
                    let s = g.shape().to_vec();
                    let hw = s[2] * s[3];
                    let ctot = s[1];
                    let (ca, cb) = (*split, ctot - *split);
                    let mut da = Tensor::zeros(&[s[0], ca, s[2], s[3]]);
                    let mut db = Tensor::zeros(&[s[0], cb, s[2], s[3]]);
                    for in_ in 0..s[0] {
                        let src = in_ * ctot * hw;
                        da.data_mut()[in_ * ca * hw..(in_ + 1) * ca * hw].copy_from_slice(&g.data()[src..src + ca * hw]);
                        db.data_mut()[in_ * cb * hw..(in_ + 1) * cb * hw].copy_from_slice(&g.data()[src + ca * hw..src + ctot * hw]);
                    }
                    give(&mut grads, *a, da);
                    give(&mut grads, *b, db);
                }
                Op::SliceC { x, count } => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let hw = xs[2] * xs[3];
                    let mut dx = Tensor::zeros(&xs);
                    for in_ in 0..xs[0] {
                        let dst = in_ * xs[1] * hw;
                        dx.data_mut()[dst..dst + count * hw].copy_from_slice(&g.data()[in_ * count * hw..(in_ + 1) * count * hw]);
                    }
                    give(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let gv = g.item()?;
                    give(&mut grads, *x, Tensor::full(nodes[x.0].value.shape(), gv));
                }
                Op::Mse { a, b } => {
                    let gv = g.item()?;
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let scale = gv * T::of(2.0) / T::of(av.numel() as f64);
                    let d = av.zip_map(bv, "mse_bwd", |x, y| (x - y) * scale)?;
                    give(&mut grads, *a, d.clone());
                    give(&mut grads, *b, d.map(|v| -v));
                }
                Op::CrossEntropy { logits, labels, mask } => {
                    let gv = g.item()?;
                    let lv = &nodes[logits.0].value;
                    let (n, c) = (lv.shape()[0], lv.shape()[1]);
                    let counted = |row: usize| mask.as_ref().map(|m| m[row]).unwrap_or(true);
                    let count = T::of((0..n).filter(|&r| counted(r)).count() as f64);
                    let mut dl = Tensor::zeros(&[n, c]);
                    for row in 0..n {
                        if !counted(row) {
                            continue;
                        }
                        let r = &lv.data()[row * c..(row + 1) * c];
                        let m = r.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                        let denom: T = r.iter().map(|&v| (v - m).exp()).sum();
                        for cc in 0..c {
                            let p = (r[cc] - m).exp() / denom;
                            let target = if cc == labels[row] { T::one() } else { T::zero() };
                            dl.data_mut()[row * c + cc] = gv * (p - target) / count;
                        }
                    }
                    give(&mut grads, *logits, dl);
                }
                Op::TvNorm { x } => {
                    let gv = g.item()?;
                    give(&mut grads, *x, tv_norm_backward(&nodes[x.0].value, gv)?);
                }
                Op::TvSmooth { x, gamma, eps } => {
                    let xv = &nodes[x.0].value;
                    let gam = nodes[gamma.0].value.item()?;
                    if nodes[x.0].needs_grad {
                        give(&mut grads, *x, tv_smooth_backward_x(xv, gam, *eps, &g)?);
                    }
                    if nodes[gamma.0].needs_grad {
                        // y = x - gamma^2 u  =>  d loss / d gamma = -2 gamma <g, u>
                        let u = tv_flow(xv, *eps)?;
                        let dot = g.dot(&u)?;
                        give(&mut grads, *gamma, Tensor::scalar(-(T::of(2.0)) * gam * dot));
                    }
                }
                Op::WeightNorm { w, sigma } => {
                    let wv = &nodes[w.0].value;
                    let n = T::of(wv.numel() as f64);
                    let denom = *sigma + T::of(1e-6);
                    let gbar = g.sum() / n;
                    let y = out;
                    let gy: T = g.dot(y)?;
                    let mut dw = Tensor::zeros(wv.shape());
                    for ((d, &gi), &yi) in dw.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        let mut v = (gi - gbar) / denom;
                        if *sigma > T::zero() {
                            v -= gy * yi / (n * *sigma);
                        }
                        *d = v;
                    }
                    give(&mut grads, *w, dw);
                }
                Op::Custom { inputs, rule } => {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let deltas = rule.backward(&vals, out, &g);
                    debug_assert_eq!(deltas.len(), inputs.len(), "custom rule must return one slot per input");
                    for (v, d) in inputs.iter().zip(deltas) {
                        if let Some(d) = d {
                            give(&mut grads, *v, d);
                        }
                    }
                }
            }
        }

        // Guarantee an entry for every trainable leaf, even unreached ones.
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

// ── total-variation kernels (shared by forward and backward) ────────────

fn check4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::shape(op, format!("expected rank-4 tensor, got {:?}", s))),
    }
}

/// Anisotropic TV: sum of |forward difference| along both spatial axes.
pub(crate) fn tv_norm_value<T: Scalar>(x: &Tensor<T>) -> Result<T> {
    let [n, c, h, w] = check4("tv_norm", x)?;
    let xd = x.data();
    let mut total = T::zero();
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..h {
            for j in 0..w.saturating_sub(1) {
                total += (xd[base + i * w + j + 1] - xd[base + i * w + j]).abs();
            }
        }
        for i in 0..h.saturating_sub(1) {
            for j in 0..w {
                total += (xd[base + (i + 1) * w + j] - xd[base + i * w + j]).abs();
            }
        }
    }
    Ok(total)
}

fn tv_norm_backward<T: Scalar>(x: &Tensor<T>, g: T) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("tv_norm", x)?;
    let xd = x.data();
    let mut dx = Tensor::zeros(x.shape());
    let dd = dx.data_mut();
    let sgn = |v: T| {
        if v > T::zero() {
            g
        } else if v < T::zero() {
            -g
        } else {
            T::zero() // subgradient choice at kinks
        }
    };
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..h {
            for j in 0..w.saturating_sub(1) {
                let s = sgn(xd[base + i * w + j + 1] - xd[base + i * w + j]);
                dd[base + i * w + j + 1] += s;
                dd[base + i * w + j] -= s;
            }
        }
        for i in 0..h.saturating_sub(1) {
            for j in 0..w {
                let s = sgn(xd[base + (i + 1) * w + j] - xd[base + i * w + j]);
                dd[base + (i + 1) * w + j] += s;
                dd[base + i * w + j] -= s;
            }
        }
    }
    Ok(dx)
}

/// The smoothing flow `(Dx + Dy) x`: for every forward-difference edge with
/// value `d`, the saturating response `d / (|d| + eps)` is scattered back to
/// the edge endpoints. Reflecting boundaries fall out of simply having no
/// edges across the border, so constants are fixed points.
pub(crate) fn tv_flow<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("tv_smooth", x)?;
    let xd = x.data();
    let mut u = Tensor::zeros(x.shape());
    let ud = u.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..h {
            for j in 0..w.saturating_sub(1) {
                let d = xd[base + i * w + j + 1] - xd[base + i * w + j];
                let phi = d / (d.abs() + eps);
                ud[base + i * w + j + 1] += phi;
                ud[base + i * w + j] -= phi;
            }
        }
        for i in 0..h.saturating_sub(1) {
            for j in 0..w {
                let d = xd[base + (i + 1) * w + j] - xd[base + i * w + j];
                let phi = d / (d.abs() + eps);
                ud[base + (i + 1) * w + j] += phi;
                ud[base + i * w + j] -= phi;
            }
        }
    }
    Ok(u)
}

pub(crate) fn tv_smooth_value<T: Scalar>(x: &Tensor<T>, gamma: T, eps: T) -> Result<Tensor<T>> {
    let u = tv_flow(x, eps)?;
    let g2 = gamma * gamma;
    x.zip_map(&u, "tv_smooth", |xv, uv| xv - g2 * uv)
}

/// VJP of [`tv_smooth_value`] w.r.t. `x`. The response derivative is
/// `phi'(d) = eps / (|d| + eps)^2`, continuous everywhere (one-sided limits
/// at d = 0 agree), so the whole map is C^1 and finite-difference checkable.
fn tv_smooth_backward_x<T: Scalar>(x: &Tensor<T>, gamma: T, eps: T, g: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = check4("tv_smooth", x)?;
    let xd = x.data();
    let gd = g.data();
    let g2 = gamma * gamma;
    let mut dx = g.clone();
    let dd = dx.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..h {
            for j in 0..w.saturating_sub(1) {
                let (lo, hi) = (base + i * w + j, base + i * w + j + 1);
                let d = xd[hi] - xd[lo];
                let a = d.abs() + eps;
                let dphi = eps / (a * a);
                // cotangent of the edge response: (g[hi] - g[lo]) phi'(d),
                // scattered with the same +/- pattern as the forward.
                let e = (gd[hi] - gd[lo]) * dphi * g2;
                dd[hi] -= e;
                dd[lo] += e;
            }
        }
        for i in 0..h.saturating_sub(1) {
            for j in 0..w {
                let (lo, hi) = (base + i * w + j, base + (i + 1) * w + j);
                let d = xd[hi] - xd[lo];
                let a = d.abs() + eps;
                let dphi = eps / (a * a);
                let e = (gd[hi] - gd[lo]) * dphi * g2;
                dd[hi] -= e;
                dd[lo] += e;
            }
        }
    }
    Ok(dx)
}
