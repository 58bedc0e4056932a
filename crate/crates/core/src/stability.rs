//! Empirical stability laboratory.
//!
//! The theory says a symmetric residual step `x - h K^T sigma(K x)` cannot
//! amplify perturbations when `h < 2 / (L |K|^2)` (its Jacobian
//! `I - h K^T Omega K` has spectrum in [-1, 1]), while the plain step
//! `x + h K1 sigma(K2 x)` carries no such guarantee. This module measures
//! all of that on concrete networks: operator norms by power iteration,
//! Jacobian eigenvalue ranges by a dense solve, per-block step-bound
//! reports, paired quantized/full-precision activation traces with their
//! per-entry MSE divergence, and direct perturbation propagation.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::graph::{GcnKind, GraphNetwork, GraphOperator};
use crate::layers::{BlockKind, BlockParams, Network, QuantMode, ResKind, TV_EPS};
use crate::ops::{self, ConvGeom, Padding};
use crate::quant;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── linear operators and norms ──────────────────────────────────────────

/// A linear map with an adjoint, as power iteration sees it.
pub trait LinearOp<T: Scalar> {
    fn input_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn apply_t(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Same-padded stride-1 convolution on `[1, C, H, W]` inputs.
pub struct ConvOp<T: Scalar> {
    kernel: Tensor<T>,
    geom: ConvGeom,
    in_shape: Vec<usize>,
}

impl<T: Scalar> ConvOp<T> {
    pub fn new(kernel: &Tensor<T>, hw: (usize, usize)) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 {
            return Err(Error::shape("ConvOp", format!("kernel must be [O, I, kh, kw], got {:?}", ks)));
        }
        let geom = ConvGeom::new(hw, (ks[2], ks[3]), 1, Padding::Same)?;
        Ok(ConvOp { kernel: kernel.clone(), geom, in_shape: vec![1, ks[1], hw.0, hw.1] })
    }
}

impl<T: Scalar> LinearOp<T> for ConvOp<T> {
    fn input_shape(&self) -> Vec<usize> {
        self.in_shape.clone()
    }
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.kernel, &self.geom)
    }
    fn apply_t(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d_transpose(y, &self.kernel, &self.geom)
    }
}

/// Depthwise same-padded convolution on `[1, C, H, W]`.
pub struct DepthwiseOp<T: Scalar> {
    kernel: Tensor<T>,
    geom: ConvGeom,
    in_shape: Vec<usize>,
}

impl<T: Scalar> DepthwiseOp<T> {
    pub fn new(kernel: &Tensor<T>, hw: (usize, usize)) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 || ks[1] != 1 {
            return Err(Error::shape("DepthwiseOp", format!("kernel must be [C, 1, kh, kw], got {:?}", ks)));
        }
        let geom = ConvGeom::new(hw, (ks[2], ks[3]), 1, Padding::Same)?;
        Ok(DepthwiseOp { kernel: kernel.clone(), geom, in_shape: vec![1, ks[0], hw.0, hw.1] })
    }
}

impl<T: Scalar> LinearOp<T> for DepthwiseOp<T> {
    fn input_shape(&self) -> Vec<usize> {
        self.in_shape.clone()
    }
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::depthwise_conv2d(x, &self.kernel, &self.geom)
    }
    fn apply_t(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        ops::depthwise_conv2d_transpose(y, &self.kernel, &self.geom)
    }
}

/// Channel mixing `x -> x M^T` on `[rows, f]` features.
pub struct MatrixMixOp<T: Scalar> {
    matrix: Tensor<T>,
    rows: usize,
}

impl<T: Scalar> MatrixMixOp<T> {
    pub fn new(matrix: &Tensor<T>, rows: usize) -> Self {
        MatrixMixOp { matrix: matrix.clone(), rows }
    }
}

impl<T: Scalar> LinearOp<T> for MatrixMixOp<T> {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.rows, self.matrix.shape()[1]]
    }
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::feature_matmul(x, &self.matrix, false)
    }
    fn apply_t(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        ops::feature_matmul(y, &self.matrix, true)
    }
}

/// Edge-incidence map `x -> S x` on `[n, f]` node features.
pub struct IncidenceOp<T: Scalar> {
    op: Rc<GraphOperator<T>>,
    features: usize,
}

impl<T: Scalar> IncidenceOp<T> {
    pub fn new(op: &Rc<GraphOperator<T>>, features: usize) -> Self {
        IncidenceOp { op: op.clone(), features }
    }
}

impl<T: Scalar> LinearOp<T> for IncidenceOp<T> {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.op.n_nodes, self.features]
    }
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.op.apply(x)
    }
    fn apply_t(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.op.apply_t(y)
    }
}

/// Composition `second . first` (apply `first`, then `second`).
pub struct ChainOp<A, B> {
    pub first: A,
    pub second: B,
}

impl<T: Scalar, A: LinearOp<T>, B: LinearOp<T>> LinearOp<T> for ChainOp<A, B> {
    fn input_shape(&self) -> Vec<usize> {
        self.first.input_shape()
    }
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.second.apply(&self.first.apply(x)?)
    }
    fn apply_t(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.first.apply_t(&self.second.apply_t(y)?)
    }
}

/// Largest singular value by power iteration on `K^T K`, deterministic in
/// `seed`. Stops when the Rayleigh quotient moves by less than
/// `1e-9 * max(1, lambda)` or after 10^4 iterations.
pub fn operator_norm<T: Scalar>(op: &dyn LinearOp<T>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Tensor::<T>::randn(&op.input_shape(), T::one(), &mut rng);
    let n = v.l2_norm();
    if n == T::zero() {
        return Err(Error::arg("operator_norm", "empty input shape"));
    }
    v = v.map(|x| x / n);
    let mut lambda = f64::NAN;
    for _ in 0..10_000 {
        let w = op.apply(&v)?;
        let wn = w.l2_norm().as_f64();
        let next = wn * wn; // v^T K^T K v with |v| = 1
        if next == 0.0 {
            return Ok(0.0);
        }
        let back = op.apply_t(&w)?;
        let bn = back.l2_norm();
        if bn == T::zero() {
            return Ok(next.sqrt());
        }
        v = back.map(|x| x / bn);
        if !lambda.is_nan() && (next - lambda).abs() <= 1e-9 * next.abs().max(1.0) {
            return Ok(next.sqrt());
        }
        lambda = next;
    }
    Ok(lambda.sqrt())
}

// ── Jacobian spectrum ───────────────────────────────────────────────────

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
/// Intended for the laboratory's small dense operators (n <= a few
/// hundred); returns the values in ascending order.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::shape("symmetric_eigenvalues", format!("{} entries for n = {}", a.len(), n)));
    }
    let mut m = a.to_vec();
    let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = m[i * n + p];
                    let aiq = m[i * n + q];
                    m[i * n + p] = c * aip - s * aiq;
                    m[i * n + q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = m[p * n + i];
                    let aqi = m[q * n + i];
                    m[p * n + i] = c * api - s * aqi;
                    m[q * n + i] = s * api + c * aqi;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(eig)
}

/// Eigenvalue range of the residual-step Jacobian `I - h K^T Omega K` for
/// a dense `K` (`[m, n]`) and activation slopes `omega` (`[m]`, each in
/// [0, 1] for ReLU). The spectral radius is <= 1 exactly when
/// `h |Omega^{1/2} K|^2 <= 2`.
pub fn jacobian_spectrum(k: &Tensor<f64>, h: f64, omega: &[f64]) -> Result<(f64, f64)> {
    let (m, n) = match k.shape() {
        &[m, n] => (m, n),
        s => return Err(Error::shape("jacobian_spectrum", format!("expected dense [m, n], got {:?}", s))),
    };
    if omega.len() != m {
        return Err(Error::shape("jacobian_spectrum", format!("{} slopes for {} rows", omega.len(), m)));
    }
    if let Some(&bad) = omega.iter().find(|&&w| !(0.0..=1.0).contains(&w)) {
        return Err(Error::arg("jacobian_spectrum", format!("slope {} outside [0, 1]", bad)));
    }
    let kd = k.data();
    let mut jac = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for e in 0..m {
                acc += kd[e * n + i] * omega[e] * kd[e * n + j];
            }
            jac[i * n + j] = if i == j { 1.0 - h * acc } else { -h * acc };
        }
    }
    let eig = symmetric_eigenvalues(&jac, n)?;
    Ok((eig[0], eig[eig.len() - 1]))
}

// ── step-bound report ───────────────────────────────────────────────────

/// One trunk block's stability verdict. `certified` marks blocks whose
/// structure actually carries the non-expansiveness theorem (symmetric
/// kinds, parameter-free kinds); for plain kinds the bound uses the
/// product of the two kernel norms as an indicative proxy only.
#[derive(Debug, Clone)]
pub struct StepBoundRow {
    pub index: usize,
    pub kind: String,
    pub h: f64,
    pub norm: f64,
    pub bound: f64,
    pub ok: bool,
    pub certified: bool,
}

fn row(index: usize, kind: &str, h: f64, norm: f64, lipschitz: f64, certified: bool) -> StepBoundRow {
    let bound = if norm > 0.0 { 2.0 / (lipschitz * norm * norm) } else { f64::INFINITY };
    StepBoundRow { index, kind: kind.to_string(), h, norm, bound, ok: h < bound, certified }
}

fn proxy_row(index: usize, kind: &str, h: f64, norm_product: f64, lipschitz: f64) -> StepBoundRow {
    let bound = if norm_product > 0.0 { 2.0 / (lipschitz * norm_product) } else { f64::INFINITY };
    StepBoundRow { index, kind: kind.to_string(), h, norm: norm_product, bound, ok: h < bound, certified: false }
}

/// Checks `h < 2 / (L |K|^2)` for every trunk block of an image network,
/// using the kernels as currently stored and the given input spatial size
/// (pooling halves it along the way).
pub fn check_step_bound<T: Scalar>(
    net: &Network<T>,
    input_hw: (usize, usize),
    lipschitz: f64,
    seed: u64,
) -> Result<Vec<StepBoundRow>> {
    let mut rows = Vec::new();
    let mut hw = input_hw;
    for index in net.trunk_range() {
        let block = &net.blocks[index];
        let h = block.spec.h;
        let norm_of = |k: &Tensor<T>| -> Result<f64> { operator_norm(&ConvOp::new(k, hw)?, seed ^ index as u64) };
        match (&block.spec.kind, &block.params) {
            (BlockKind::SymRes, BlockParams::SymRes { k }) => {
                rows.push(row(index, "sym_res", h, norm_of(k)?, lipschitz, true));
            }
            (BlockKind::PlainRes, BlockParams::PlainRes { k1, k2 }) => {
                rows.push(proxy_row(index, "plain_res", h, norm_of(k1)? * norm_of(k2)?, lipschitz));
            }
            (BlockKind::SymMobile, BlockParams::SymMobile { k1, kd }) => {
                let composite = ChainOp { first: ConvOp::new(k1, hw)?, second: DepthwiseOp::new(kd, hw)? };
                let norm = operator_norm(&composite, seed ^ index as u64)?;
                rows.push(row(index, "sym_mobile", 1.0, norm, lipschitz, true));
            }
            (BlockKind::PlainMobile, BlockParams::PlainMobile { k1, kd, k3 }) => {
                let product = norm_of(k1)? * operator_norm(&DepthwiseOp::new(kd, hw)?, seed ^ index as u64)? * norm_of(k3)?;
                rows.push(proxy_row(index, "plain_mobile", 1.0, product, lipschitz));
            }
            (BlockKind::ChannelChange(inner), BlockParams::ChannelChange(p)) => match (inner, p.as_ref()) {
                (ResKind::Symmetric, BlockParams::SymRes { k }) => {
                    rows.push(row(index, "channel_change(sym)", h, norm_of(k)?, lipschitz, true));
                }
                (ResKind::Plain, BlockParams::PlainRes { k1, k2 }) => {
                    rows.push(proxy_row(index, "channel_change(plain)", h, norm_of(k1)? * norm_of(k2)?, lipschitz));
                }
                _ => unreachable!("connector params match its kind"),
            },
            (BlockKind::AvgPool, _) => {
                rows.push(StepBoundRow {
                    index,
                    kind: "avg_pool".to_string(),
                    h: 0.0,
                    norm: 0.5,
                    bound: f64::INFINITY,
                    ok: true,
                    certified: true,
                });
                hw = (hw.0 / 2, hw.1 / 2);
            }
            (BlockKind::Tv, _) => {
                let gamma2 = block.gamma.as_ref().map(|g| g.data()[0].as_f64().powi(2)).unwrap_or(0.0);
                // The maximum principle needs gamma^2 * 4 <= eps.
                let certified = gamma2 * 4.0 <= TV_EPS;
                rows.push(StepBoundRow {
                    index,
                    kind: "tv".to_string(),
                    h: 0.0,
                    norm: gamma2,
                    bound: TV_EPS / 4.0,
                    ok: certified,
                    certified,
                });
            }
            (kind, _) => {
                return Err(Error::BadBlockSpec { index, detail: format!("unexpected trunk kind {:?}", kind) });
            }
        }
        if let Some(last) = rows.last() {
            debug_assert_eq!(last.index, index);
        }
    }
    Ok(rows)
}

/// Step-bound rows for a graph network; the measured operator is the
/// composite `K S` (theory-exact for the symmetric kind, norm-product
/// proxy for the non-symmetric one).
pub fn check_step_bound_graph<T: Scalar>(net: &GraphNetwork<T>, lipschitz: f64, seed: u64) -> Result<Vec<StepBoundRow>> {
    let width = net.spec.width;
    let mut rows = Vec::new();
    for li in 0..net.spec.layers {
        let index = li + 1;
        let mut kernels = Vec::new();
        net.visit_params(|key, t| {
            if let crate::layers::ParamKey::Block { index: bi, slot } = key {
                if bi == index && matches!(slot, crate::layers::Slot::K0 | crate::layers::Slot::K1) {
                    kernels.push(t.clone());
                }
            }
        });
        let incidence = IncidenceOp::new(&net.operator, width);
        match net.spec.kind {
            GcnKind::Sym => {
                let edges = net.operator.n_edges();
                let composite = ChainOp { first: incidence, second: MatrixMixOp::new(&kernels[0], edges) };
                let norm = operator_norm(&composite, seed ^ index as u64)?;
                rows.push(row(index, "gcn_sym", net.spec.h, norm, lipschitz, true));
            }
            GcnKind::Nonsym => {
                let edges = net.operator.n_edges();
                let forward = ChainOp { first: incidence, second: MatrixMixOp::new(&kernels[0], edges) };
                let n1 = operator_norm(&forward, seed ^ index as u64)?;
                // Return path S^T K2: measure K2 mixing then incidence adjoint
                // via the chain's adjoint of (S, K2^T-mix) — norms of an
                // operator and its adjoint agree, so measure K2-mix then S^T
                // as |S^T K2| = |K2^T S|.
                let k2t = transpose_matrix(&kernels[1]);
                let back = ChainOp {
                    first: IncidenceOp::new(&net.operator, width),
                    second: MatrixMixOp::new(&k2t, net.operator.n_edges()),
                };
                let n2 = operator_norm(&back, seed ^ (index as u64) << 1)?;
                rows.push(proxy_row(index, "gcn_nonsym", net.spec.h, n1 * n2, lipschitz));
            }
        }
    }
    Ok(rows)
}

fn transpose_matrix<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut t = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            t.data_mut()[j * r + i] = m.data()[i * c + j];
        }
    }
    t
}

// ── reference step probes ───────────────────────────────────────────────

/// One symmetric image step `x - h K^T relu(K x)`, evaluated directly on
/// tensors; the laboratory's probe for non-expansiveness trials.
pub fn sym_step_image<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, h: T) -> Result<Tensor<T>> {
    let s = x.shape();
    let ks = k.shape();
    let geom = ConvGeom::new((s[2], s[3]), (ks[2], ks[3]), 1, Padding::Same)?;
    let a = ops::conv2d(x, k, &geom)?.map(|v| v.max(T::zero()));
    let v = ops::conv2d_transpose(&a, k, &geom)?;
    x.zip_map(&v, "sym_step", |xi, vi| xi - h * vi)
}

/// One plain image step `x + h K1 relu(K2 x)`.
pub fn plain_step_image<T: Scalar>(x: &Tensor<T>, k1: &Tensor<T>, k2: &Tensor<T>, h: T) -> Result<Tensor<T>> {
    let s = x.shape();
    let geom2 = ConvGeom::new((s[2], s[3]), (k2.shape()[2], k2.shape()[3]), 1, Padding::Same)?;
    let geom1 = ConvGeom::new((s[2], s[3]), (k1.shape()[2], k1.shape()[3]), 1, Padding::Same)?;
    let a = ops::conv2d(x, k2, &geom2)?.map(|v| v.max(T::zero()));
    let v = ops::conv2d(&a, k1, &geom1)?;
    x.zip_map(&v, "plain_step", |xi, vi| xi + h * vi)
}

/// One symmetric graph step `x - h S^T K^T relu(K S x)`.
pub fn sym_step_graph<T: Scalar>(x: &Tensor<T>, s: &GraphOperator<T>, k: &Tensor<T>, h: T) -> Result<Tensor<T>> {
    let sx = s.apply(x)?;
    let a = ops::feature_matmul(&sx, k, false)?.map(|v| v.max(T::zero()));
    let v = ops::feature_matmul(&a, k, true)?;
    let w = s.apply_t(&v)?;
    x.zip_map(&w, "sym_step_graph", |xi, wi| xi - h * wi)
}

// ── traces and divergence ───────────────────────────────────────────────

/// Per-trunk-block activation snapshots from one forward pass, detached
/// from the tape.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T: Scalar> {
    pub entries: Vec<TraceEntry<T>>,
}

#[derive(Debug, Clone)]
pub struct TraceEntry<T: Scalar> {
    pub index: usize,
    pub kind: String,
    pub values: Tensor<T>,
}

fn kind_name(kind: BlockKind) -> String {
    match kind {
        BlockKind::Opening => "opening",
        BlockKind::PlainRes => "plain_res",
        BlockKind::SymRes => "sym_res",
        BlockKind::PlainMobile => "plain_mobile",
        BlockKind::SymMobile => "sym_mobile",
        BlockKind::ChannelChange(ResKind::Plain) => "channel_change(plain)",
        BlockKind::ChannelChange(ResKind::Symmetric) => "channel_change(sym)",
        BlockKind::AvgPool => "avg_pool",
        BlockKind::Tv => "tv",
        BlockKind::Classifier => "classifier",
    }
    .to_string()
}

fn trace_image<T: Scalar>(net: &mut Network<T>, input: &Tensor<T>, acts: bool) -> Result<ActivationTrace<T>> {
    let tape = Tape::new();
    let x = tape.constant(input.clone());
    let mode = QuantMode { weights: true, acts };
    let pass = net.forward(&tape, x, mode)?;
    let trunk: Vec<usize> = net.trunk_range().collect();
    let entries = trunk
        .iter()
        .zip(&pass.taps)
        .map(|(&index, &tap)| TraceEntry {
            index,
            kind: kind_name(net.blocks[index].spec.kind),
            values: tape.value(tap).clone(),
        })
        .collect();
    Ok(ActivationTrace { entries })
}

/// Runs the same frozen network twice over one input — activation
/// quantizers on, then off — and returns both traces. Weights must be
/// frozen first so the two runs share one weight snapshot. `bits_a` of 32
/// or more means "full precision on both sides"; anything lower must match
/// the bit width the activation quantizers were trained at.
pub fn paired_trace<T: Scalar>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    bits_a: u32,
) -> Result<(ActivationTrace<T>, ActivationTrace<T>)> {
    if !net.is_frozen() {
        return Err(Error::arg("paired_trace", "freeze quantized weights before tracing"));
    }
    let quantized = bits_a < 32;
    if quantized {
        for block in &net.blocks {
            if let Some(q) = block.aq.first() {
                if q.bits != bits_a {
                    return Err(Error::arg(
                        "paired_trace",
                        format!("activation quantizers trained at {} bits, asked for {}", q.bits, bits_a),
                    ));
                }
            }
        }
    }
    let tq = trace_image(net, input, quantized)?;
    let tf = trace_image(net, input, false)?;
    Ok((tq, tf))
}

fn trace_graph<T: Scalar>(net: &mut GraphNetwork<T>, features: &Tensor<T>, acts: bool) -> Result<ActivationTrace<T>> {
    let tape = Tape::new();
    let x = tape.constant(features.clone());
    let pass = net.forward(&tape, x, QuantMode { weights: true, acts })?;
    let kind = match net.spec.kind {
        GcnKind::Sym => "gcn_sym",
        GcnKind::Nonsym => "gcn_nonsym",
    };
    let entries = pass
        .taps
        .iter()
        .enumerate()
        .map(|(li, &tap)| TraceEntry { index: li + 1, kind: kind.to_string(), values: tape.value(tap).clone() })
        .collect();
    Ok(ActivationTrace { entries })
}

/// Graph counterpart of [`paired_trace`].
pub fn paired_trace_graph<T: Scalar>(
    net: &mut GraphNetwork<T>,
    features: &Tensor<T>,
    bits_a: u32,
) -> Result<(ActivationTrace<T>, ActivationTrace<T>)> {
    if !net.is_frozen() {
        return Err(Error::arg("paired_trace", "freeze quantized weights before tracing"));
    }
    let quantized = bits_a < 32;
    let tq = trace_graph(net, features, quantized)?;
    let tf = trace_graph(net, features, false)?;
    Ok((tq, tf))
}

/// Per-block divergence between paired traces: per-entry MSE (summed
/// squared difference divided by element count), plus run metadata.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub per_block: Vec<f64>,
    pub kinds: Vec<String>,
    pub bits: u32,
    pub seed: u64,
    pub arch: String,
}

impl DivergenceReport {
    pub fn final_mse(&self) -> f64 {
        *self.per_block.last().unwrap_or(&0.0)
    }

    /// CSV with header `layer,mse`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mse\n");
        for (i, mse) in self.per_block.iter().enumerate() {
            out.push_str(&format!("{},{:e}\n", i + 1, mse));
        }
        out
    }
}

pub fn divergence<T: Scalar>(
    quantized: &ActivationTrace<T>,
    full: &ActivationTrace<T>,
    bits: u32,
    seed: u64,
    arch: &str,
) -> Result<DivergenceReport> {
    if quantized.entries.len() != full.entries.len() {
        return Err(Error::shape(
            "divergence",
            format!("{} vs {} trace entries", quantized.entries.len(), full.entries.len()),
        ));
    }
    let mut per_block = Vec::with_capacity(quantized.entries.len());
    let mut kinds = Vec::with_capacity(quantized.entries.len());
    for (a, b) in quantized.entries.iter().zip(&full.entries) {
        per_block.push(quant::mse(&a.values, &b.values)?.as_f64());
        kinds.push(a.kind.clone());
    }
    Ok(DivergenceReport { per_block, kinds, bits, seed, arch: arch.to_string() })
}

/// Side-by-side CSV (`layer,nonsym,sym` layout) for two runs over the same
/// depth; errors if the layer counts differ.
pub fn comparison_csv(left: &DivergenceReport, right: &DivergenceReport) -> Result<String> {
    if left.per_block.len() != right.per_block.len() {
        return Err(Error::shape(
            "comparison_csv",
            format!("{} ({}) vs {} ({}) layers", left.per_block.len(), left.arch, right.per_block.len(), right.arch),
        ));
    }
    let mut out = format!("layer,{},{}\n", left.arch, right.arch);
    for (i, (a, b)) in left.per_block.iter().zip(&right.per_block).enumerate() {
        out.push_str(&format!("{},{:e},{:e}\n", i + 1, a, b));
    }
    Ok(out)
}

// ── perturbation growth ─────────────────────────────────────────────────

/// Propagates `input` and `input + eta0` through the network in full
/// precision and records the l2 norm of the difference: entry 0 is
/// `|eta0|`, then one entry per trunk block.
pub fn perturbation_growth<T: Scalar>(net: &mut Network<T>, input: &Tensor<T>, eta0: &Tensor<T>) -> Result<Vec<f64>> {
    let perturbed = input.zip_map(eta0, "perturbation_growth", |a, b| a + b)?;
    let base = trace_image(net, input, false)?;
    let bumped = trace_image(net, &perturbed, false)?;
    let mut norms = vec![eta0.l2_norm().as_f64()];
    for (a, b) in bumped.entries.iter().zip(&base.entries) {
        let d = a.values.zip_map(&b.values, "perturbation_growth", |x, y| x - y)?;
        norms.push(d.l2_norm().as_f64());
    }
    Ok(norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_network, BlockSpec, ParamKey, Slot};
    use crate::graph::Graph;

    fn kernel1x1(values: &[f64], co: usize, ci: usize) -> Tensor<f64> {
        Tensor::new(vec![co, ci, 1, 1], values.to_vec()).unwrap()
    }

    #[test]
    fn norm_of_identity_and_scaled_kernels() {
        let id = kernel1x1(&[1.0], 1, 1);
        let op = ConvOp::new(&id, (4, 4)).unwrap();
        assert!((operator_norm(&op, 0).unwrap() - 1.0).abs() < 1e-9);
        let scaled = kernel1x1(&[-2.5], 1, 1);
        let op = ConvOp::new(&scaled, (4, 4)).unwrap();
        assert!((operator_norm(&op, 0).unwrap() - 2.5).abs() < 1e-9);
        let zero = kernel1x1(&[0.0], 1, 1);
        let op = ConvOp::new(&zero, (4, 4)).unwrap();
        assert_eq!(operator_norm(&op, 0).unwrap(), 0.0);
    }

    #[test]
    fn norm_matches_dense_svd_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        // As a 1x1-conv bank over a 5x5 image, the per-pixel mixing has the
        // matrix's largest singular value.
        let k = Tensor::new(vec![8, 8, 1, 1], m.data().to_vec()).unwrap();
        let op = ConvOp::new(&k, (5, 5)).unwrap();
        let mine = operator_norm(&op, 3).unwrap();
        let dense = nalgebra::DMatrix::from_row_slice(8, 8, m.data());
        let oracle = dense.svd(false, false).singular_values[0];
        assert!((mine - oracle).abs() <= 1e-6 * oracle, "{} vs {}", mine, oracle);
    }

    #[test]
    fn jacobi_matches_nalgebra_eigensolver() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 16;
        let raw = Tensor::<f64>::randn(&[n, n], 1.0, &mut rng);
        // Symmetrize.
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (raw.data()[i * n + j] + raw.data()[j * n + i]);
            }
        }
        let mine = symmetric_eigenvalues(&sym, n).unwrap();
        let mat = nalgebra::DMatrix::from_row_slice(n, n, &sym);
        let mut oracle: Vec<f64> = nalgebra::SymmetricEigen::new(mat).eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in mine.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn jacobian_spectrum_scalar_closed_forms() {
        let k = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (lo, hi) = jacobian_spectrum(&k, 0.5, &[1.0]).unwrap();
        assert!((lo - 0.5).abs() < 1e-15 && (hi - 0.5).abs() < 1e-15);
        let (lo, hi) = jacobian_spectrum(&k, 2.0, &[1.0]).unwrap();
        assert!((lo + 1.0).abs() < 1e-15 && (hi + 1.0).abs() < 1e-15);
        let (lo, hi) = jacobian_spectrum(&k, 0.5, &[0.0]).unwrap();
        assert_eq!((lo, hi), (1.0, 1.0));
        assert!(jacobian_spectrum(&k, 0.5, &[1.5]).is_err());
    }

    fn sym_net_1ch(h: f64, kval: f64) -> Network<f64> {
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 1).with_h(0.0).with_kernel(1),
            BlockSpec::new(BlockKind::SymRes, 1, 1).with_h(h).with_kernel(1),
            BlockSpec::new(BlockKind::Classifier, 1, 2),
        ];
        let mut net = build_network::<f64>(&specs, 0).unwrap();
        *net.param_mut(ParamKey::Block { index: 0, slot: Slot::K0 }).unwrap() = kernel1x1(&[1.0], 1, 1);
        *net.param_mut(ParamKey::Block { index: 1, slot: Slot::K0 }).unwrap() = kernel1x1(&[kval], 1, 1);
        net
    }

    #[test]
    fn step_bound_rows_track_h_and_kernel_scale() {
        // |K| = 1: bound 2; h = 0.5 passes, h = 2 fails (strict).
        let rows = check_step_bound(&sym_net_1ch(0.5, 1.0), (4, 4), 1.0, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].bound - 2.0).abs() < 1e-8);
        assert!(rows[0].ok && rows[0].certified);
        let rows = check_step_bound(&sym_net_1ch(2.0, 1.0), (4, 4), 1.0, 0).unwrap();
        assert!(!rows[0].ok);
        // Scaling K by 2 divides the bound by 4.
        let rows = check_step_bound(&sym_net_1ch(0.5, 2.0), (4, 4), 1.0, 0).unwrap();
        assert!((rows[0].bound - 0.5).abs() < 1e-8);
    }

    #[test]
    fn perturbation_growth_zero_and_doubling() {
        // Plain scalar trunk K1 = K2 = 1, h = 1 on positive inputs doubles
        // any positive perturbation each block.
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 1).with_kernel(1),
            BlockSpec::new(BlockKind::PlainRes, 1, 1).with_h(1.0).with_kernel(1),
            BlockSpec::new(BlockKind::PlainRes, 1, 1).with_h(1.0).with_kernel(1),
            BlockSpec::new(BlockKind::PlainRes, 1, 1).with_h(1.0).with_kernel(1),
            BlockSpec::new(BlockKind::Classifier, 1, 2),
        ];
        let mut net = build_network::<f64>(&specs, 0).unwrap();
        *net.param_mut(ParamKey::Block { index: 0, slot: Slot::K0 }).unwrap() = kernel1x1(&[1.0], 1, 1);
        for b in 1..=3 {
            *net.param_mut(ParamKey::Block { index: b, slot: Slot::K0 }).unwrap() = kernel1x1(&[1.0], 1, 1);
            *net.param_mut(ParamKey::Block { index: b, slot: Slot::K1 }).unwrap() = kernel1x1(&[1.0], 1, 1);
        }
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let zero = Tensor::zeros(&[1, 1, 1, 1]);
        let norms = perturbation_growth(&mut net, &x, &zero).unwrap();
        assert!(norms.iter().all(|&v| v == 0.0));
        let eta = Tensor::new(vec![1, 1, 1, 1], vec![0.25]).unwrap();
        let norms = perturbation_growth(&mut net, &x, &eta).unwrap();
        assert_eq!(norms, vec![0.25, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn sym_step_probe_is_nonexpansive_within_bound() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let k = Tensor::<f64>::randn(&[3, 3, 3, 3], 0.6, &mut rng);
            let norm = operator_norm(&ConvOp::new(&k, (6, 6)).unwrap(), trial).unwrap();
            let h = 0.9 * 2.0 / (norm * norm);
            let x = Tensor::randn(&[1, 3, 6, 6], 1.0, &mut rng);
            let eta = Tensor::randn(&[1, 3, 6, 6], 0.1, &mut rng);
            let xp = x.zip_map(&eta, "t", |a, b| a + b).unwrap();
            let d = sym_step_image(&xp, &k, h)
                .unwrap()
                .zip_map(&sym_step_image(&x, &k, h).unwrap(), "t", |a, b| a - b)
                .unwrap();
            assert!(d.l2_norm() <= eta.l2_norm() + 1e-10, "trial {}", trial);
        }
    }

    #[test]
    fn paired_trace_requires_frozen_weights_and_reports_divergence() {
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(4, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(4, 4),
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        let mut net = build_network::<f64>(&specs, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[1, 1, 8, 8], 1.0, &mut rng);
        assert!(paired_trace(&mut net, &x, 4).is_err());
        net.freeze_quantized_weights().unwrap();
        // Calibrate activation quantizers with one quantized pass.
        let _ = trace_image(&mut net, &x, true).unwrap();
        let (tq, tf) = paired_trace(&mut net, &x, 4).unwrap();
        let report = divergence(&tq, &tf, 4, 2, "sym_res").unwrap();
        assert_eq!(report.per_block.len(), 2);
        assert!(report.per_block.iter().all(|&v| v >= 0.0));
        // Identical settings on both sides: zero everywhere.
        let (ta, tb) = paired_trace(&mut net, &x, 32).unwrap();
        let zeros = divergence(&ta, &tb, 32, 2, "sym_res").unwrap();
        assert!(zeros.per_block.iter().all(|&v| v == 0.0));
        // Wrong bit width is refused rather than silently re-binned.
        assert!(paired_trace(&mut net, &x, 3).is_err());
        let csv = report.to_csv();
        assert!(csv.starts_with("layer,mse\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn divergence_unit_difference_and_mismatch() {
        let mk = |v: f64| ActivationTrace::<f64> {
            entries: vec![TraceEntry { index: 1, kind: "sym_res".into(), values: Tensor::full(&[2, 2], v) }],
        };
        let r = divergence(&mk(1.0), &mk(0.0), 4, 0, "x").unwrap();
        assert_eq!(r.per_block, vec![1.0]);
        let long = ActivationTrace::<f64> { entries: vec![mk(0.0).entries[0].clone(), mk(0.0).entries[0].clone()] };
        assert!(divergence(&mk(0.0), &long, 4, 0, "x").is_err());
        let csv = comparison_csv(&r, &r).unwrap();
        assert!(csv.starts_with("layer,x,x\n"));
    }

    #[test]
    fn graph_step_bound_uses_composite_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let g = Graph::new(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], feats).unwrap();
        let spec = crate::graph::GcnSpec {
            kind: GcnKind::Sym,
            layers: 2,
            features_in: 4,
            width: 4,
            classes: 2,
            h: 0.05,
            quant: None,
        };
        let net = crate::graph::build_graph_network(&spec, &g, 7).unwrap();
        let rows = check_step_bound_graph(&net, 1.0, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.certified && r.norm > 0.0));
    }
}
