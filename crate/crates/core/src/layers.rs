//! Residual network blocks and assembly.
//!
//! Trunk blocks come in paired variants: a conventional residual step
//! `x + h K1 sigma(K2 x)` and its symmetric counterpart
//! `x - h K^T sigma(K x)`, which reuses one kernel for both convolutions
//! (half the parameters) and makes the step non-expansive whenever
//! `h < 2 / (L |K|^2)`. Separable (mobile) blocks follow the same pairing,
//! and a concatenating connector widens channels without projection
//! weights. A reweighted smoothing step can be fused into any activation
//! (`sigma(S(x))`) or used as a standalone block.
//!
//! Quantization sites are fixed by construction: weights are standardized
//! and signed-quantized per kernel, activations are quantized unsigned
//! after every rectifier and signed after every residual combination, and
//! the trunk entry carries one unsigned site so the first block sees
//! on-grid input. The opening convolution and the classifier head always
//! run in full precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Padding;
use crate::quant::{self, Quantizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Edge-weight regularization floor for the smoothing layer.
pub const TV_EPS: f64 = 1e-3;

/// Which residual step a connector block embeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResKind {
    Plain,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Full-precision stem convolution plus rectifier.
    Opening,
    /// `x + h K1 sigma(K2 x)`.
    PlainRes,
    /// `x - h K^T sigma(K x)`.
    SymRes,
    /// `x + K3 sigma(K2d sigma(K1 x))` with a depthwise middle.
    PlainMobile,
    /// `x - K1^T K2d^T sigma(K2d K1 x)`; the depthwise kernel is used twice.
    SymMobile,
    /// Residual step at the input width, concatenated with copied input
    /// channels to reach `c_out` (`c_in <= c_out <= 2 c_in`).
    ChannelChange(ResKind),
    /// 2x2 average pooling, stride 2; parameter-free.
    AvgPool,
    /// Standalone smoothing step `x - gamma^2 (Dx + Dy) x`.
    Tv,
    /// Global average pooling plus an affine map to class logits.
    Classifier,
}

/// Bit widths attached to a block; `None` on the spec leaves the block in
/// full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits_w: u32,
    pub bits_a: u32,
}

/// Declarative description of one block; a network is a list of these.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial kernel extent for the block's convolutions (odd).
    pub kernel: usize,
    /// Residual step size; ignored by non-residual kinds.
    pub h: f64,
    pub quant: Option<QuantSpec>,
    /// When set, activations become `sigma(S(x))` with this initial gamma
    /// (Tv blocks use it as their own scale).
    pub tv_gamma: Option<f64>,
}

impl BlockSpec {
    /// Spec with the common defaults: 3x3 kernels, step 0.5, no
    /// quantization, no smoothing.
    pub fn new(kind: BlockKind, c_in: usize, c_out: usize) -> Self {
        BlockSpec { kind, c_in, c_out, kernel: 3, h: 0.5, quant: None, tv_gamma: None }
    }

    pub fn with_quant(mut self, bits_w: u32, bits_a: u32) -> Self {
        self.quant = Some(QuantSpec { bits_w, bits_a });
        self
    }

    pub fn with_tv(mut self, gamma: f64) -> Self {
        self.tv_gamma = Some(gamma);
        self
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }
}

/// Stable 64-bit digest of an architecture, stored in checkpoints so a
/// model file cannot silently load into a different network. FNV-1a over a
/// canonical rendering of the spec list.
pub fn fingerprint(specs: &[BlockSpec]) -> u64 {
    let mut text = String::new();
    for s in specs {
        let kind = match s.kind {
            BlockKind::Opening => "opening".to_string(),
            BlockKind::PlainRes => "plain_res".to_string(),
            BlockKind::SymRes => "sym_res".to_string(),
            BlockKind::PlainMobile => "plain_mobile".to_string(),
            BlockKind::SymMobile => "sym_mobile".to_string(),
            BlockKind::ChannelChange(ResKind::Plain) => "channel_change(plain)".to_string(),
            BlockKind::ChannelChange(ResKind::Symmetric) => "channel_change(sym)".to_string(),
            BlockKind::AvgPool => "avg_pool".to_string(),
            BlockKind::Tv => "tv".to_string(),
            BlockKind::Classifier => "classifier".to_string(),
        };
        let quant = match s.quant {
            Some(q) => format!("w{}a{}", q.bits_w, q.bits_a),
            None => "fp".to_string(),
        };
        let tv = match s.tv_gamma {
            Some(g) => format!("{:016x}", g.to_bits()),
            None => "none".to_string(),
        };
        text.push_str(&format!("{};{};{};{};{:016x};{};{}|", kind, s.c_in, s.c_out, s.kernel, s.h.to_bits(), quant, tv));
    }
    fnv1a64(&text)
}

/// FNV-1a over a canonical text rendering; the hash behind every
/// architecture fingerprint.
pub fn fnv1a64(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

// ── parameters and identity ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum BlockParams<T: Scalar> {
    Opening { k: Tensor<T> },
    PlainRes { k1: Tensor<T>, k2: Tensor<T> },
    SymRes { k: Tensor<T> },
    PlainMobile { k1: Tensor<T>, kd: Tensor<T>, k3: Tensor<T> },
    SymMobile { k1: Tensor<T>, kd: Tensor<T> },
    ChannelChange(Box<BlockParams<T>>),
    AvgPool,
    Tv,
    Classifier { w: Tensor<T>, b: Tensor<T> },
}

/// Stable identity of one trainable tensor inside a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    /// Clip scale of the trunk-entry activation quantizer.
    InputAlpha,
    Block { index: usize, slot: Slot },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    K0,
    K1,
    K2,
    Gamma,
    ClsW,
    ClsB,
    AlphaW(u8),
    AlphaA(u8),
}

impl ParamKey {
    /// Canonical record name used in checkpoints.
    pub fn name(&self) -> String {
        match self {
            ParamKey::InputAlpha => "input.alpha".to_string(),
            ParamKey::Block { index, slot } => match slot {
                Slot::K0 => format!("b{}.k0", index),
                Slot::K1 => format!("b{}.k1", index),
                Slot::K2 => format!("b{}.k2", index),
                Slot::Gamma => format!("b{}.gamma", index),
                Slot::ClsW => format!("b{}.w", index),
                Slot::ClsB => format!("b{}.b", index),
                Slot::AlphaW(i) => format!("b{}.alpha_w{}", index, i),
                Slot::AlphaA(i) => format!("b{}.alpha_a{}", index, i),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub spec: BlockSpec,
    pub params: BlockParams<T>,
    /// Weight quantizers, one per kernel, in [`Slot::K0`] order.
    pub wq: Vec<Quantizer<T>>,
    /// Activation quantizers in dataflow order (rectifier sites first,
    /// the signed post-residual site last).
    pub aq: Vec<Quantizer<T>>,
    /// Smoothing scale when the block owns one (fused or standalone).
    pub gamma: Option<Tensor<T>>,
    tv_warned: bool,
}

/// Quantization toggles for one forward pass. Training uses both; the
/// stability laboratory switches activations off to obtain the
/// full-precision twin of a quantized run.
#[derive(Debug, Clone, Copy)]
pub struct QuantMode {
    pub weights: bool,
    pub acts: bool,
}

impl QuantMode {
    pub const FULL: QuantMode = QuantMode { weights: true, acts: true };
    pub const WEIGHTS_ONLY: QuantMode = QuantMode { weights: true, acts: false };
    pub const OFF: QuantMode = QuantMode { weights: false, acts: false };
}

/// Everything one forward pass exposes: the head output, per-trunk-block
/// activation taps, the (key, tape var) pairs for every registered
/// parameter, and the quantized-activation sites for integer cross-checks.
pub struct ForwardPass<T: Scalar> {
    pub output: Var,
    pub taps: Vec<Var>,
    pub params: Vec<(ParamKey, Var)>,
    pub qsites: Vec<(String, Var)>,
    _marker: std::marker::PhantomData<T>,
}

// ── activation-site helper ──────────────────────────────────────────────

/// Bundles a block's activation machinery for the free-standing forward
/// functions: the rectifier (optionally fused with smoothing) and the
/// quantization sites. Records (site, alpha var, quantized var) events so
/// the caller can attach parameter keys.
pub struct ActSites<'a, T: Scalar> {
    tape: &'a Tape<T>,
    enabled: bool,
    quants: &'a mut [Quantizer<T>],
    tv: Option<(Var, T)>,
    pub events: Vec<SiteEvent>,
}

pub struct SiteEvent {
    pub site: usize,
    pub alpha: Var,
    pub quantized: Var,
}

impl<'a, T: Scalar> ActSites<'a, T> {
    pub fn new(tape: &'a Tape<T>, quants: &'a mut [Quantizer<T>], tv: Option<(Var, T)>, enabled: bool) -> Self {
        ActSites { tape, enabled, quants, tv, events: Vec::new() }
    }

    /// The block's nonlinearity: smoothing (when fused) followed by ReLU.
    pub fn activation(&self, x: Var) -> Result<Var> {
        let x = match self.tv {
            Some((gamma, eps)) => self.tape.tv_smooth(x, gamma, eps)?,
            None => x,
        };
        Ok(self.tape.relu(x))
    }

    /// Applies quantization site `index` if present and enabled; identity
    /// otherwise.
    pub fn quant(&mut self, index: usize, x: Var) -> Result<Var> {
        if !self.enabled || index >= self.quants.len() {
            return Ok(x);
        }
        let q = &mut self.quants[index];
        if !q.enabled {
            return Ok(x);
        }
        if !q.initialized {
            q.init_from_batch(&self.tape.value(x));
        }
        let alpha = self.tape.param(&q.alpha);
        let out = quant::fake_quant_var(self.tape, x, alpha, q.bits, q.signed)?;
        self.events.push(SiteEvent { site: index, alpha, quantized: out });
        Ok(out)
    }
}

// ── block forward functions ─────────────────────────────────────────────

/// Stem: plain convolution plus rectifier, never quantized.
pub fn opening_forward<T: Scalar>(tape: &Tape<T>, x: Var, k: Var) -> Result<Var> {
    Ok(tape.relu(tape.conv2d(x, k, 1, Padding::Same)?))
}

/// `x + h K1 sigma(K2 x)`, unsigned quantization after the rectifier
/// (site 0) and signed after the residual sum (site 1).
pub fn plain_res_forward<T: Scalar>(tape: &Tape<T>, x: Var, k1: Var, k2: Var, h: T, sites: &mut ActSites<'_, T>) -> Result<Var> {
    let u = tape.conv2d(x, k2, 1, Padding::Same)?;
    let a = sites.activation(u)?;
    let a = sites.quant(0, a)?;
    let v = tape.conv2d(a, k1, 1, Padding::Same)?;
    let y = tape.add(x, tape.scale(v, h))?;
    sites.quant(1, y)
}

/// `x - h K^T sigma(K x)`: one kernel serves both convolutions, so the
/// update is the negative gradient of `integral of sigma at (K x)` and the
/// step is non-expansive under the usual bound. Sites as in the plain
/// block.
pub fn sym_res_forward<T: Scalar>(tape: &Tape<T>, x: Var, k: Var, h: T, sites: &mut ActSites<'_, T>) -> Result<Var> {
    let geom = {
        let xs = tape.shape(x);
        let ks = tape.shape(k);
        crate::ops::ConvGeom::new((xs[2], xs[3]), (ks[2], ks[3]), 1, Padding::Same)?
    };
    let u = tape.conv2d_with_geom(x, k, geom)?;
    let a = sites.activation(u)?;
    let a = sites.quant(0, a)?;
    let v = tape.conv2d_transpose(a, k, geom)?;
    let y = tape.sub(x, tape.scale(v, h))?;
    sites.quant(1, y)
}

/// `x + K3 sigma(K2d sigma(K1 x))`: pointwise, depthwise, pointwise.
/// Unsigned sites after each rectifier (0, 1), signed after the sum (2).
pub fn plain_mobile_forward<T: Scalar>(tape: &Tape<T>, x: Var, k1: Var, kd: Var, k3: Var, sites: &mut ActSites<'_, T>) -> Result<Var> {
    let u1 = tape.conv2d(x, k1, 1, Padding::Same)?;
    let a1 = sites.activation(u1)?;
    let a1 = sites.quant(0, a1)?;
    let u2 = tape.depthwise_conv2d(a1, kd, Padding::Same)?;
    let a2 = sites.activation(u2)?;
    let a2 = sites.quant(1, a2)?;
    let v = tape.conv2d(a2, k3, 1, Padding::Same)?;
    let y = tape.add(x, v)?;
    sites.quant(2, y)
}

/// `x - K1^T K2d^T sigma(K2d K1 x)`: the separable composite `K2d K1`
/// plays the role of the symmetric block's kernel, with the depthwise
/// kernel applied twice (forward and adjoint). One rectifier (site 0),
/// signed site 1 after the sum.
pub fn sym_mobile_forward<T: Scalar>(tape: &Tape<T>, x: Var, k1: Var, kd: Var, sites: &mut ActSites<'_, T>) -> Result<Var> {
    let xs = tape.shape(x);
    let ks1 = tape.shape(k1);
    let ksd = tape.shape(kd);
    let geom1 = crate::ops::ConvGeom::new((xs[2], xs[3]), (ks1[2], ks1[3]), 1, Padding::Same)?;
    let geomd = crate::ops::ConvGeom::new((xs[2], xs[3]), (ksd[2], ksd[3]), 1, Padding::Same)?;
    let z = tape.conv2d_with_geom(x, k1, geom1)?;
    let z = tape.depthwise_conv2d(z, kd, Padding::Same)?;
    let a = sites.activation(z)?;
    let a = sites.quant(0, a)?;
    let b1 = tape.depthwise_conv2d_transpose(a, kd, geomd)?;
    let v = tape.conv2d_transpose(b1, k1, geom1)?;
    let y = tape.sub(x, v)?;
    sites.quant(1, y)
}

/// Widens `c_in` to `c_out` by concatenating a residual step's output with
/// the first `c_out - c_in` input channels; no projection weights. The
/// signed quantization site sits after the concatenation so the whole
/// block output shares one scale. With `c_out == c_in` this degenerates to
/// the embedded residual step.
pub fn channel_change_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    inner: ResKind,
    kernels: &[Var],
    h: T,
    c_out: usize,
    sites: &mut ActSites<'_, T>,
) -> Result<Var> {
    let c_in = tape.shape(x)[1];
    let r = match inner {
        ResKind::Symmetric => {
            let geom = {
                let xs = tape.shape(x);
                let ks = tape.shape(kernels[0]);
                crate::ops::ConvGeom::new((xs[2], xs[3]), (ks[2], ks[3]), 1, Padding::Same)?
            };
            let u = tape.conv2d_with_geom(x, kernels[0], geom)?;
            let a = sites.activation(u)?;
            let a = sites.quant(0, a)?;
            let v = tape.conv2d_transpose(a, kernels[0], geom)?;
            tape.sub(x, tape.scale(v, h))?
        }
        ResKind::Plain => {
            let u = tape.conv2d(x, kernels[1], 1, Padding::Same)?;
            let a = sites.activation(u)?;
            let a = sites.quant(0, a)?;
            let v = tape.conv2d(a, kernels[0], 1, Padding::Same)?;
            tape.add(x, tape.scale(v, h))?
        }
    };
    let y = if c_out > c_in {
        let tail = tape.slice_channels(x, c_out - c_in)?;
        tape.concat_channels(r, tail)?
    } else {
        r
    };
    sites.quant(1, y)
}

/// Head: global average pooling followed by an affine map to logits.
pub fn classifier_forward<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.linear(tape.global_avg_pool(x)?, w, Some(b))
}

/// One standalone smoothing step (see [`Tape::tv_smooth`]).
pub fn tv_smooth<T: Scalar>(tape: &Tape<T>, x: Var, gamma: Var, eps: T) -> Result<Var> {
    tape.tv_smooth(x, gamma, eps)
}

// ── network ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub blocks: Vec<Block<T>>,
    /// Unsigned quantizer between the stem and the first trunk block;
    /// present whenever any trunk block is quantized.
    pub input_quant: Option<Quantizer<T>>,
    frozen: bool,
}

/// Validates a spec list and initializes parameters (He-scaled normal
/// draws, deterministic in `seed`).
pub fn build_network<T: Scalar>(specs: &[BlockSpec], seed: u64) -> Result<Network<T>> {
    validate_specs(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(specs.len());
    for spec in specs {
        let params = init_params::<T>(spec, &mut rng)?;
        let (wq, aq) = build_quantizers(spec, &params)?;
        let gamma = spec.tv_gamma.map(|g| Tensor::scalar(T::of(g)));
        blocks.push(Block { spec: spec.clone(), params, wq, aq, gamma, tv_warned: false });
    }
    let input_quant = match specs.iter().skip(1).find(|s| s.quant.is_some()) {
        Some(s) => Some(Quantizer::for_activations(s.quant.unwrap().bits_a, false)?),
        None => None,
    };
    Ok(Network { blocks, input_quant, frozen: false })
}

fn validate_specs(specs: &[BlockSpec]) -> Result<()> {
    let bad = |index: usize, detail: &str| Err(Error::BadBlockSpec { index, detail: detail.to_string() });
    if specs.len() < 2 {
        return bad(0, "a network needs at least an opening and a classifier");
    }
    if specs[0].kind != BlockKind::Opening {
        return bad(0, "first block must be the opening");
    }
    if specs[specs.len() - 1].kind != BlockKind::Classifier {
        return bad(specs.len() - 1, "last block must be the classifier");
    }
    for (i, s) in specs.iter().enumerate() {
        if i > 0 && s.kind == BlockKind::Opening {
            return bad(i, "opening must be unique and first");
        }
        if i + 1 < specs.len() && s.kind == BlockKind::Classifier {
            return bad(i, "classifier must be unique and last");
        }
        if i > 0 && s.c_in != specs[i - 1].c_out {
            return bad(i, &format!("input channels {} do not match previous output {}", s.c_in, specs[i - 1].c_out));
        }
        match s.kind {
            BlockKind::PlainRes | BlockKind::SymRes | BlockKind::PlainMobile | BlockKind::SymMobile => {
                if s.c_in != s.c_out {
                    return bad(i, "residual blocks preserve channel count");
                }
            }
            BlockKind::ChannelChange(_) => {
                if !(s.c_in <= s.c_out && s.c_out <= 2 * s.c_in) {
                    return bad(i, &format!("connector needs c_in <= c_out <= 2 c_in, got {} -> {}", s.c_in, s.c_out));
                }
            }
            BlockKind::AvgPool | BlockKind::Tv => {
                if s.c_in != s.c_out {
                    return bad(i, "parameter-free blocks preserve channel count");
                }
            }
            BlockKind::Classifier => {
                if s.c_out < 2 {
                    return bad(i, "classifier needs at least 2 classes");
                }
            }
            BlockKind::Opening => {}
        }
        if matches!(s.kind, BlockKind::Opening | BlockKind::PlainRes | BlockKind::SymRes | BlockKind::ChannelChange(_)) && s.kernel % 2 == 0 {
            return bad(i, "convolution kernels must be odd for same padding");
        }
        if matches!(
            s.kind,
            BlockKind::PlainRes | BlockKind::SymRes | BlockKind::PlainMobile | BlockKind::SymMobile | BlockKind::ChannelChange(_)
        ) && s.h <= 0.0
        {
            return bad(i, "residual step size must be strictly positive");
        }
        if let Some(q) = s.quant {
            quant::levels(q.bits_w, true).map_err(|_| Error::BadBlockSpec { index: i, detail: format!("bad weight bits {}", q.bits_w) })?;
            quant::levels(q.bits_a, false).map_err(|_| Error::BadBlockSpec { index: i, detail: format!("bad activation bits {}", q.bits_a) })?;
        }
        if s.kind == BlockKind::Tv && s.tv_gamma.is_none() {
            return bad(i, "standalone smoothing block needs an initial gamma");
        }
    }
    Ok(())
}

fn conv_init<T: Scalar>(co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = T::of((2.0 / (ci * k * k) as f64).sqrt());
    Tensor::randn(&[co, ci, k, k], std, rng)
}

fn init_params<T: Scalar>(spec: &BlockSpec, rng: &mut ChaCha8Rng) -> Result<BlockParams<T>> {
    let k = spec.kernel;
    Ok(match spec.kind {
        BlockKind::Opening => BlockParams::Opening { k: conv_init(spec.c_out, spec.c_in, k, rng) },
        BlockKind::PlainRes => BlockParams::PlainRes {
            k1: conv_init(spec.c_in, spec.c_in, k, rng),
            k2: conv_init(spec.c_in, spec.c_in, k, rng),
        },
        BlockKind::SymRes => BlockParams::SymRes { k: conv_init(spec.c_in, spec.c_in, k, rng) },
        BlockKind::PlainMobile => BlockParams::PlainMobile {
            k1: conv_init(spec.c_in, spec.c_in, 1, rng),
            kd: Tensor::randn(&[spec.c_in, 1, k, k], T::of((2.0 / (k * k) as f64).sqrt()), rng),
            k3: conv_init(spec.c_in, spec.c_in, 1, rng),
        },
        BlockKind::SymMobile => BlockParams::SymMobile {
            k1: conv_init(spec.c_in, spec.c_in, 1, rng),
            kd: Tensor::randn(&[spec.c_in, 1, k, k], T::of((2.0 / (k * k) as f64).sqrt()), rng),
        },
        BlockKind::ChannelChange(inner) => {
            let inner_params = match inner {
                ResKind::Symmetric => BlockParams::SymRes { k: conv_init(spec.c_in, spec.c_in, k, rng) },
                ResKind::Plain => BlockParams::PlainRes {
                    k1: conv_init(spec.c_in, spec.c_in, k, rng),
                    k2: conv_init(spec.c_in, spec.c_in, k, rng),
                },
            };
            BlockParams::ChannelChange(Box::new(inner_params))
        }
        BlockKind::AvgPool => BlockParams::AvgPool,
        BlockKind::Tv => BlockParams::Tv,
        BlockKind::Classifier => {
            let std = T::of((1.0 / spec.c_in as f64).sqrt());
            BlockParams::Classifier { w: Tensor::randn(&[spec.c_out, spec.c_in], std, rng), b: Tensor::zeros(&[spec.c_out]) }
        }
    })
}

pub(crate) fn kernels_of<T: Scalar>(params: &BlockParams<T>) -> Vec<&Tensor<T>> {
    match params {
        BlockParams::Opening { .. } | BlockParams::Classifier { .. } | BlockParams::AvgPool | BlockParams::Tv => vec![],
        BlockParams::PlainRes { k1, k2 } => vec![k1, k2],
        BlockParams::SymRes { k } => vec![k],
        BlockParams::PlainMobile { k1, kd, k3 } => vec![k1, kd, k3],
        BlockParams::SymMobile { k1, kd } => vec![k1, kd],
        BlockParams::ChannelChange(inner) => kernels_of(inner),
    }
}

fn act_site_count(kind: BlockKind) -> usize {
    match kind {
        BlockKind::PlainRes | BlockKind::SymRes | BlockKind::SymMobile | BlockKind::ChannelChange(_) => 2,
        BlockKind::PlainMobile => 3,
        _ => 0,
    }
}

fn build_quantizers<T: Scalar>(spec: &BlockSpec, params: &BlockParams<T>) -> Result<(Vec<Quantizer<T>>, Vec<Quantizer<T>>)> {
    let Some(q) = spec.quant else {
        return Ok((vec![], vec![]));
    };
    let mut wq = Vec::new();
    for kernel in kernels_of(params) {
        wq.push(Quantizer::for_weights(q.bits_w, kernel)?);
    }
    let sites = act_site_count(spec.kind);
    let mut aq = Vec::new();
    for site in 0..sites {
        // The last site follows a residual combination whose values may be
        // negative; rectifier sites are non-negative.
        let signed = site + 1 == sites;
        aq.push(Quantizer::for_activations(q.bits_a, signed)?);
    }
    Ok((wq, aq))
}

impl<T: Scalar> Network<T> {
    pub fn specs(&self) -> Vec<BlockSpec> {
        self.blocks.iter().map(|b| b.spec.clone()).collect()
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.specs())
    }

    pub fn classes(&self) -> usize {
        self.blocks.last().map(|b| b.spec.c_out).unwrap_or(0)
    }

    /// Indices of trunk blocks (everything between opening and classifier).
    pub fn trunk_range(&self) -> std::ops::Range<usize> {
        1..self.blocks.len().saturating_sub(1)
    }

    /// Runs the network, producing logits, per-trunk-block taps, parameter
    /// registrations and quantized-activation sites.
    pub fn forward(&mut self, tape: &Tape<T>, input: Var, mode: QuantMode) -> Result<ForwardPass<T>> {
        let mut params: Vec<(ParamKey, Var)> = Vec::new();
        let mut qsites: Vec<(String, Var)> = Vec::new();
        let mut taps: Vec<Var> = Vec::new();

        // Stem (full precision).
        let BlockParams::Opening { k } = &self.blocks[0].params else {
            return Err(Error::BadBlockSpec { index: 0, detail: "first block must be the opening".into() });
        };
        let kv = tape.param(k);
        params.push((ParamKey::Block { index: 0, slot: Slot::K0 }, kv));
        let mut x = opening_forward(tape, input, kv)?;

        // Trunk entry quantizer.
        if let Some(q) = &mut self.input_quant {
            if q.enabled && mode.acts {
                if !q.initialized {
                    q.init_from_batch(&tape.value(x));
                }
                let alpha = tape.param(&q.alpha);
                params.push((ParamKey::InputAlpha, alpha));
                x = quant::fake_quant_var(tape, x, alpha, q.bits, q.signed)?;
                qsites.push(("input".to_string(), x));
            }
        }

        let trunk = self.trunk_range();
        for index in trunk {
            x = self.forward_block(tape, index, x, mode, &mut params, &mut qsites)?;
            taps.push(x);
        }

        // Head (full precision).
        let last = self.blocks.len() - 1;
        let BlockParams::Classifier { w, b } = &self.blocks[last].params else {
            return Err(Error::BadBlockSpec { index: last, detail: "last block must be the classifier".into() });
        };
        let wv = tape.param(w);
        let bv = tape.param(b);
        params.push((ParamKey::Block { index: last, slot: Slot::ClsW }, wv));
        params.push((ParamKey::Block { index: last, slot: Slot::ClsB }, bv));
        let output = classifier_forward(tape, x, wv, bv)?;

        Ok(ForwardPass { output, taps, params, qsites, _marker: std::marker::PhantomData })
    }

    fn forward_block(
        &mut self,
        tape: &Tape<T>,
        index: usize,
        x: Var,
        mode: QuantMode,
        params: &mut Vec<(ParamKey, Var)>,
        qsites: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        let block = &mut self.blocks[index];
        let h = T::of(block.spec.h);

        // Register kernels, applying weight quantization where attached.
        let kernel_slots = [Slot::K0, Slot::K1, Slot::K2];
        let kernels = kernels_of(&block.params);
        let mut kvars = Vec::with_capacity(kernels.len());
        for (i, kernel) in kernels.into_iter().enumerate() {
            let kv = tape.param(kernel);
            params.push((ParamKey::Block { index, slot: kernel_slots[i] }, kv));
            let effective = if mode.weights && block.wq.get(i).map(|q| q.enabled).unwrap_or(false) {
                let normed = tape.weight_normalize(kv)?;
                let alpha = tape.param(&block.wq[i].alpha);
                params.push((ParamKey::Block { index, slot: Slot::AlphaW(i as u8) }, alpha));
                quant::fake_quant_var(tape, normed, alpha, block.wq[i].bits, true)?
            } else {
                kv
            };
            kvars.push(effective);
        }

        // Smoothing scale (fused or standalone).
        let tv = match &block.gamma {
            Some(g) => {
                let gamma = T::of(g.data()[0].as_f64());
                let eps = T::of(TV_EPS);
                if !block.tv_warned && (gamma * gamma * T::of(4.0) / eps) > T::one() {
                    eprintln!(
                        "warning: block {} smoothing scale gamma^2 = {:.3e} exceeds the maximum-principle bound eps/4 = {:.3e}; extremes may overshoot",
                        index,
                        (gamma * gamma).as_f64(),
                        (eps / T::of(4.0)).as_f64()
                    );
                    block.tv_warned = true;
                }
                let gv = tape.param(g);
                params.push((ParamKey::Block { index, slot: Slot::Gamma }, gv));
                Some((gv, eps))
            }
            None => None,
        };

        let mut sites = ActSites::new(tape, &mut block.aq, tv, mode.acts);
        let kind = block.spec.kind;
        let y = match kind {
            BlockKind::PlainRes => plain_res_forward(tape, x, kvars[0], kvars[1], h, &mut sites)?,
            BlockKind::SymRes => sym_res_forward(tape, x, kvars[0], h, &mut sites)?,
            BlockKind::PlainMobile => plain_mobile_forward(tape, x, kvars[0], kvars[1], kvars[2], &mut sites)?,
            BlockKind::SymMobile => sym_mobile_forward(tape, x, kvars[0], kvars[1], &mut sites)?,
            BlockKind::ChannelChange(inner) => channel_change_forward(tape, x, inner, &kvars, h, block.spec.c_out, &mut sites)?,
            BlockKind::AvgPool => tape.avg_pool2(x)?,
            BlockKind::Tv => {
                let (gv, eps) = tv.expect("validated: standalone smoothing has gamma");
                tape.tv_smooth(x, gv, eps)?
            }
            BlockKind::Opening | BlockKind::Classifier => {
                return Err(Error::BadBlockSpec { index, detail: "stem/head inside trunk".into() });
            }
        };
        for ev in sites.events {
            params.push((ParamKey::Block { index, slot: Slot::AlphaA(ev.site as u8) }, ev.alpha));
            qsites.push((format!("b{}.a{}", index, ev.site), ev.quantized));
        }
        Ok(y)
    }

    /// Mutable access to one parameter tensor.
    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        match key {
            ParamKey::InputAlpha => self.input_quant.as_mut().map(|q| &mut q.alpha),
            ParamKey::Block { index, slot } => {
                let block = self.blocks.get_mut(index)?;
                match (slot, &mut block.params) {
                    (Slot::K0, BlockParams::Opening { k }) => Some(k),
                    (Slot::K0, BlockParams::SymRes { k }) => Some(k),
                    (Slot::K0, BlockParams::PlainRes { k1, .. }) => Some(k1),
                    (Slot::K1, BlockParams::PlainRes { k2, .. }) => Some(k2),
                    (Slot::K0, BlockParams::PlainMobile { k1, .. }) => Some(k1),
                    (Slot::K1, BlockParams::PlainMobile { kd, .. }) => Some(kd),
                    (Slot::K2, BlockParams::PlainMobile { k3, .. }) => Some(k3),
                    (Slot::K0, BlockParams::SymMobile { k1, .. }) => Some(k1),
                    (Slot::K1, BlockParams::SymMobile { kd, .. }) => Some(kd),
                    (Slot::K0, BlockParams::ChannelChange(inner)) => match inner.as_mut() {
                        BlockParams::SymRes { k } => Some(k),
                        BlockParams::PlainRes { k1, .. } => Some(k1),
                        _ => None,
                    },
                    (Slot::K1, BlockParams::ChannelChange(inner)) => match inner.as_mut() {
                        BlockParams::PlainRes { k2, .. } => Some(k2),
                        _ => None,
                    },
                    (Slot::ClsW, BlockParams::Classifier { w, .. }) => Some(w),
                    (Slot::ClsB, BlockParams::Classifier { b, .. }) => Some(b),
                    (Slot::Gamma, _) => block.gamma.as_mut(),
                    (Slot::AlphaW(i), _) => block.wq.get_mut(i as usize).map(|q| &mut q.alpha),
                    (Slot::AlphaA(i), _) => block.aq.get_mut(i as usize).map(|q| &mut q.alpha),
                    _ => None,
                }
            }
        }
    }

    /// Visits every trainable tensor with its key, in block order.
    pub fn visit_params(&self, mut f: impl FnMut(ParamKey, &Tensor<T>)) {
        if let Some(q) = &self.input_quant {
            f(ParamKey::InputAlpha, &q.alpha);
        }
        let kernel_slots = [Slot::K0, Slot::K1, Slot::K2];
        for (index, block) in self.blocks.iter().enumerate() {
            match &block.params {
                BlockParams::Opening { k } => f(ParamKey::Block { index, slot: Slot::K0 }, k),
                BlockParams::Classifier { w, b } => {
                    f(ParamKey::Block { index, slot: Slot::ClsW }, w);
                    f(ParamKey::Block { index, slot: Slot::ClsB }, b);
                }
                other => {
                    for (i, kernel) in kernels_of(other).into_iter().enumerate() {
                        f(ParamKey::Block { index, slot: kernel_slots[i] }, kernel);
                    }
                }
            }
            if let Some(g) = &block.gamma {
                f(ParamKey::Block { index, slot: Slot::Gamma }, g);
            }
            for (i, q) in block.wq.iter().enumerate() {
                f(ParamKey::Block { index, slot: Slot::AlphaW(i as u8) }, &q.alpha);
            }
            for (i, q) in block.aq.iter().enumerate() {
                f(ParamKey::Block { index, slot: Slot::AlphaA(i as u8) }, &q.alpha);
            }
        }
    }

    /// Total element count of trainable tensors, trunk blocks only or the
    /// whole network.
    pub fn param_count(&self, trunk_only: bool) -> usize {
        let trunk = self.trunk_range();
        let mut total = 0;
        self.visit_params(|key, t| {
            let counted = match key {
                ParamKey::InputAlpha => !trunk_only,
                ParamKey::Block { index, .. } => !trunk_only || trunk.contains(&index),
            };
            if counted {
                total += t.numel();
            }
        });
        total
    }

    /// Number of convolution kernels in block `index`.
    pub fn kernel_count(&self, index: usize) -> usize {
        kernels_of(&self.blocks[index].params).len()
    }

    /// Sets all quantizer bit widths (weights and activations move
    /// together under the training schedule).
    pub fn set_bits(&mut self, bits_w: u32, bits_a: u32) -> Result<()> {
        quant::levels(bits_w, true)?;
        quant::levels(bits_a, false)?;
        for block in &mut self.blocks {
            for q in &mut block.wq {
                q.bits = bits_w;
            }
            for q in &mut block.aq {
                q.bits = bits_a;
            }
        }
        if let Some(q) = &mut self.input_quant {
            q.bits = bits_a;
        }
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Restores the frozen flag when loading a checkpoint whose kernels
    /// were already snapped to the grid before saving.
    pub(crate) fn mark_frozen(&mut self) {
        self.frozen = true;
    }

    /// Replaces every quantized kernel by its on-grid value (standardize,
    /// clip, snap with the current scale) and disables the weight
    /// quantizers. After freezing, all forward modes share one weight
    /// snapshot, which is what paired activation traces and integer export
    /// require. Idempotent.
    pub fn freeze_quantized_weights(&mut self) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        for block in &mut self.blocks {
            if block.wq.is_empty() {
                continue;
            }
            let kernels: Vec<Tensor<T>> = kernels_of(&block.params).into_iter().cloned().collect();
            for (i, kernel) in kernels.iter().enumerate() {
                if !block.wq[i].enabled {
                    continue;
                }
                let normed = quant::normalize_weights(kernel)?;
                let snapped = quant::fake_quant_weights(&normed, block.wq[i].alpha_value(), block.wq[i].bits)?;
                block.wq[i].enabled = false;
                *kernel_mut(&mut block.params, i) = snapped;
            }
        }
        self.frozen = true;
        Ok(())
    }
}

fn kernel_mut<T: Scalar>(params: &mut BlockParams<T>, i: usize) -> &mut Tensor<T> {
    match (params, i) {
        (BlockParams::PlainRes { k1, .. }, 0) => k1,
        (BlockParams::PlainRes { k2, .. }, 1) => k2,
        (BlockParams::SymRes { k }, 0) => k,
        (BlockParams::PlainMobile { k1, .. }, 0) => k1,
        (BlockParams::PlainMobile { kd, .. }, 1) => kd,
        (BlockParams::PlainMobile { k3, .. }, 2) => k3,
        (BlockParams::SymMobile { k1, .. }, 0) => k1,
        (BlockParams::SymMobile { kd, .. }, 1) => kd,
        (BlockParams::ChannelChange(inner), i) => kernel_mut(inner, i),
        _ => unreachable!("kernel index out of range for block"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_kernel(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()
    }

    fn no_sites<'a>(tape: &'a Tape<f64>, quants: &'a mut [Quantizer<f64>]) -> ActSites<'a, f64> {
        ActSites::new(tape, quants, None, false)
    }

    #[test]
    fn sym_step_scalar_value() {
        // K = 1, h = 0.5, x = 1: y = 1 - 0.5 * 1 * relu(1) = 0.5.
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let k = tape.constant(scalar_kernel(1.0));
        let mut q = [];
        let y = sym_res_forward(&tape, x, k, 0.5, &mut no_sites(&tape, &mut q)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn plain_step_scalar_value_doubles() {
        // K1 = K2 = 1, h = 1, x = 1: y = 1 + relu(1) = 2.
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let k = tape.constant(scalar_kernel(1.0));
        let mut q = [];
        let y = plain_res_forward(&tape, x, k, k, 1.0, &mut no_sites(&tape, &mut q)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn sym_mobile_scalar_cancels() {
        // K1 = K2d = 1, x = 1: y = 1 - 1 * (1 * relu(1)) = 0.
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let k1 = tape.constant(scalar_kernel(1.0));
        let kd = tape.constant(scalar_kernel(1.0));
        let mut q = [];
        let y = sym_mobile_forward(&tape, x, k1, kd, &mut no_sites(&tape, &mut q)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn connector_widens_by_copying_leading_channels() {
        let tape = Tape::<f64>::new();
        // Two input channels, constant values 1 and 2; widen to 3 channels
        // with a zero kernel: residual part is x itself, tail copies
        // channel 0.
        let mut x_data = vec![1.0; 4];
        x_data.extend(vec![2.0; 4]);
        let x = tape.constant(Tensor::new(vec![1, 2, 2, 2], x_data).unwrap());
        let k = tape.constant(Tensor::zeros(&[2, 2, 1, 1]));
        let mut q = [];
        let mut sites = no_sites(&tape, &mut q);
        let y = channel_change_forward(&tape, x, ResKind::Symmetric, &[k], 0.5, 3, &mut sites).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 3, 2, 2]);
        assert_eq!(&v.data()[0..4], &[1.0; 4]);
        assert_eq!(&v.data()[4..8], &[2.0; 4]);
        assert_eq!(&v.data()[8..12], &[1.0; 4]); // copied channel 0
    }

    #[test]
    fn connector_without_widening_is_the_residual_step() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let k = tape.constant(scalar_kernel(1.0));
        let mut qa = [];
        let mut qb = [];
        let direct = sym_res_forward(&tape, x, k, 0.5, &mut no_sites(&tape, &mut qa)).unwrap();
        let via_connector =
            channel_change_forward(&tape, x, ResKind::Symmetric, &[k], 0.5, 1, &mut no_sites(&tape, &mut qb)).unwrap();
        assert_eq!(tape.value(direct).data(), tape.value(via_connector).data());
    }

    #[test]
    fn build_validates_adjacency_and_kinds() {
        // Channel mismatch between blocks.
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 8, 8),
            BlockSpec::new(BlockKind::Classifier, 8, 2),
        ];
        assert!(matches!(build_network::<f64>(&specs, 0), Err(Error::BadBlockSpec { index: 1, .. })));

        // Connector widening beyond 2x.
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::ChannelChange(ResKind::Symmetric), 4, 9),
            BlockSpec::new(BlockKind::Classifier, 9, 2),
        ];
        assert!(matches!(build_network::<f64>(&specs, 0), Err(Error::BadBlockSpec { index: 1, .. })));

        // Opening + classifier alone is a valid linear model.
        let specs = vec![BlockSpec::new(BlockKind::Opening, 1, 4), BlockSpec::new(BlockKind::Classifier, 4, 2)];
        assert!(build_network::<f64>(&specs, 0).is_ok());
    }

    #[test]
    fn forward_shapes_and_taps() {
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 2, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4),
            BlockSpec::new(BlockKind::ChannelChange(ResKind::Symmetric), 4, 8),
            BlockSpec::new(BlockKind::AvgPool, 8, 8),
            BlockSpec::new(BlockKind::PlainMobile, 8, 8),
            BlockSpec::new(BlockKind::Classifier, 8, 3),
        ];
        let mut net = build_network::<f64>(&specs, 42).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 8, 8], 0.1));
        let pass = net.forward(&tape, x, QuantMode::OFF).unwrap();
        assert_eq!(tape.shape(pass.output), vec![2, 3]);
        assert_eq!(pass.taps.len(), 4);
        assert_eq!(tape.shape(pass.taps[1]), vec![2, 8, 8, 8]);
        assert_eq!(tape.shape(pass.taps[2]), vec![2, 8, 4, 4]);
        assert!(pass.qsites.is_empty());
    }

    #[test]
    fn quantized_forward_registers_sites_and_alphas() {
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(4, 4),
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        let mut net = build_network::<f64>(&specs, 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 6, 6], 0.3));
        let pass = net.forward(&tape, x, QuantMode::FULL).unwrap();
        // Sites: trunk input + rectifier + post-residual.
        let names: Vec<&str> = pass.qsites.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["input", "b1.a0", "b1.a1"]);
        // Alphas registered: input, weight, two activation sites.
        let alphas = pass
            .params
            .iter()
            .filter(|(k, _)| {
                matches!(k, ParamKey::InputAlpha | ParamKey::Block { slot: Slot::AlphaW(_) | Slot::AlphaA(_), .. })
            })
            .count();
        assert_eq!(alphas, 4);
        // Activation quantizers calibrated on first use.
        assert!(net.blocks[1].aq.iter().all(|q| q.initialized));
    }

    #[test]
    fn param_key_lookup_matches_visit() {
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::PlainRes, 4, 4).with_quant(4, 4).with_tv(0.1),
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        let mut net = build_network::<f64>(&specs, 7).unwrap();
        let mut keys = Vec::new();
        net.visit_params(|k, t| keys.push((k, t.numel())));
        for (key, numel) in keys {
            let t = net.param_mut(key).unwrap_or_else(|| panic!("{:?} not addressable", key));
            assert_eq!(t.numel(), numel, "{:?}", key);
        }
    }

    #[test]
    fn symmetric_trunk_halves_kernel_count_and_params() {
        let sym = vec![
            BlockSpec::new(BlockKind::Opening, 1, 8),
            BlockSpec::new(BlockKind::SymRes, 8, 8),
            BlockSpec::new(BlockKind::Classifier, 8, 4),
        ];
        let plain = vec![
            BlockSpec::new(BlockKind::Opening, 1, 8),
            BlockSpec::new(BlockKind::PlainRes, 8, 8),
            BlockSpec::new(BlockKind::Classifier, 8, 4),
        ];
        let sym_net = build_network::<f64>(&sym, 0).unwrap();
        let plain_net = build_network::<f64>(&plain, 0).unwrap();
        assert_eq!(sym_net.kernel_count(1), 1);
        assert_eq!(plain_net.kernel_count(1), 2);
        assert_eq!(plain_net.param_count(true), 2 * sym_net.param_count(true));
    }

    #[test]
    fn freezing_puts_kernels_on_grid_and_is_idempotent() {
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(4, 4),
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        let mut net = build_network::<f64>(&specs, 3).unwrap();
        net.freeze_quantized_weights().unwrap();
        let BlockParams::SymRes { k } = &net.blocks[1].params else { panic!() };
        let k1 = k.clone();
        let alpha = net.blocks[1].wq[0].alpha_value();
        // Every value sits on the signed 4-bit grid for the stored alpha.
        crate::quant::to_integer(&k1, alpha, 4, true, "k").unwrap();
        assert!(!net.blocks[1].wq[0].enabled);
        net.freeze_quantized_weights().unwrap();
        let BlockParams::SymRes { k } = &net.blocks[1].params else { panic!() };
        assert_eq!(&k1, k);
    }
}
