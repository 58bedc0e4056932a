//! Integer-only evaluation of quantized networks.
//!
//! Training simulates quantization in float; deployment should not have to.
//! Once weights are frozen onto their grids and every activation site is
//! calibrated, a site value is `alpha_a * (n / R_a)` and a kernel weight is
//! `alpha_k * (m / R_k)`, so a convolution between them reduces to the
//! integer sum `sum n m` — exact in `i32` — followed by one float rescale
//! per output tensor. Everything between two sites (residual sums,
//! rectifiers, fused smoothing, the full-precision stem and head) repeats
//! the float network's arithmetic expression for expression, so the next
//! site rounds to the same index and the two runs stay locked together.
//! [`compare_image`] and [`compare_graph`] check exactly that, stream by
//! stream, and report any index that disagrees.
//!
//! Average pooling sums four grid indices instead of averaging them; the
//! carried units remember the accumulated divisor and fold it into the next
//! rescale, so pooling never leaves the grid. A standalone smoothing block,
//! by contrast, rescales values *between* sites and cannot be expressed on
//! the grid — [`export_image`] refuses it (fuse the smoothing into a
//! residual block instead).
//!
//! Exported models serialize to the same container format as checkpoints;
//! the architecture fingerprint is embedded so a model file cannot load
//! against a different network shape.

use std::path::Path;

use crate::autograd::{tv_smooth_value, Tape};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::graph::{gcn_fingerprint, GcnKind, GcnLayer, GcnSpec, GraphNetwork, GraphOperator};
use crate::layers::{fingerprint, kernels_of, BlockKind, BlockSpec, Network, QuantMode, ResKind, TV_EPS};
use crate::ops::{self, ConvGeom, Padding};
use crate::quant::{self, to_integer, QuantizedTensor, Quantizer};
use crate::tensor::Tensor;

// ── grid plumbing ───────────────────────────────────────────────────────

/// Scale, width and signedness of one quantization site, detached from the
/// learnable [`Quantizer`] so a model file needs no training state.
#[derive(Debug, Clone, PartialEq)]
pub struct SitePars {
    pub alpha: f64,
    pub bits: u32,
    pub signed: bool,
}

impl SitePars {
    fn of(q: &Quantizer<f64>) -> SitePars {
        SitePars { alpha: q.alpha_value(), bits: q.bits, signed: q.signed }
    }

    fn levels(&self) -> f64 {
        quant::levels(self.bits, self.signed).expect("validated at construction") as f64
    }

    /// Grid index of each value, by the same float expression the fake
    /// quantizer evaluates (clip to `[lo, 1]` in units of `alpha`, scale to
    /// the grid, round half away from zero). Matching the expression — not
    /// just the math — is what makes integer and float runs agree bit for
    /// bit.
    fn quantize(&self, values: &[f64]) -> Vec<i32> {
        let r = self.levels();
        let lo = if self.signed { -1.0 } else { 0.0 };
        values
            .iter()
            .map(|&v| {
                let t = (v / self.alpha).max(lo).min(1.0);
                (t * r).round() as i32
            })
            .collect()
    }
}

/// A tensor carried as grid indices: value = `alpha * (n / r) / div`.
/// `div` counts the average-pooling windows folded in since the last
/// quantization site (1 everywhere else).
#[derive(Debug, Clone)]
struct Units {
    n: Vec<i32>,
    shape: Vec<usize>,
    alpha: f64,
    r: f64,
    div: f64,
}

impl Units {
    fn from_site(x: &Tensor<f64>, site: &SitePars) -> Units {
        Units { n: site.quantize(x.data()), shape: x.shape().to_vec(), alpha: site.alpha, r: site.levels(), div: 1.0 }
    }

    /// Real value per unit step; multiplying an integer accumulator by the
    /// product of the two sides' steps recovers the convolution output.
    fn step(&self) -> f64 {
        self.alpha / (self.r * self.div)
    }

    /// With `div == 1` this is the exact expression a fake-quantization
    /// site produced (`alpha * (rounded / r)`), so reconstruction is
    /// bit-identical to the float activation it mirrors.
    fn deq(&self) -> Tensor<f64> {
        let data = self.n.iter().map(|&n| self.alpha * (n as f64 / self.r) / self.div).collect();
        Tensor::new(self.shape.clone(), data).expect("shape tracked alongside data")
    }

    /// 2x2 average pooling on the grid: sums the four indices and defers
    /// the division to the divisor. Integer, hence exact.
    fn pool(&self) -> Result<Units> {
        let (n, c, h, w) = match *self.shape.as_slice() {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("avg_pool2", format!("expected rank-4 units, got {:?}", self.shape))),
        };
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("avg_pool2", format!("input {}x{} too small for a 2x2 window", h, w)));
        }
        let mut out = vec![0i32; n * c * ho * wo];
        for in_ in 0..n {
            for ic in 0..c {
                let xb = ((in_ * c + ic) * h) * w;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let base = xb + (2 * oh) * w + 2 * ow;
                        out[((in_ * c + ic) * ho + oh) * wo + ow] =
                            self.n[base] + self.n[base + 1] + self.n[base + w] + self.n[base + w + 1];
                    }
                }
            }
        }
        Ok(Units { n: out, shape: vec![n, c, ho, wo], alpha: self.alpha, r: self.r, div: self.div * 4.0 })
    }
}

fn kernel_step(k: &QuantizedTensor) -> f64 {
    k.alpha / k.levels() as f64
}

fn rescale(sum: Vec<i32>, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::new(shape, sum.into_iter().map(|s| scale * s as f64).collect()).expect("shape tracked alongside data")
}

/// Fused smoothing (when present) followed by the rectifier — the integer
/// twin of a block's activation.
fn rectify(x: &Tensor<f64>, gamma: Option<f64>) -> Result<Tensor<f64>> {
    let x = match gamma {
        Some(g) => tv_smooth_value(x, g, TV_EPS)?,
        None => x.clone(),
    };
    Ok(x.map(|v| v.max(0.0)))
}

fn same_geom(xs: &[usize], ks: &[usize]) -> Result<ConvGeom> {
    ConvGeom::new((xs[2], xs[3]), (ks[2], ks[3]), 1, Padding::Same)
}

// ── integer convolution kernels ─────────────────────────────────────────
//
// Index loops identical to the float versions in `ops`, accumulating in
// `i32`. Shape agreement is established at export, so these only debug
// assert.

fn conv2d_i32(x: &[i32], xs: &[usize], k: &QuantizedTensor, geom: &ConvGeom) -> (Vec<i32>, Vec<usize>) {
    let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kci, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    debug_assert_eq!(ci, kci);
    let (ho, wo) = geom.out_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let kd = &k.values;
    let mut y = vec![0i32; n * co * ho * wo];
    for in_ in 0..n {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0i32;
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
                                acc += kd[kb + u * kw + v] * x[xb + ih as usize * w + iw as usize];
                            }
                        }
                    }
                    y[((in_ * co + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    (y, vec![n, co, ho, wo])
}

fn conv2d_transpose_i32(y: &[i32], ys: &[usize], k: &QuantizedTensor, geom: &ConvGeom) -> (Vec<i32>, Vec<usize>) {
    let (n, co, ho, wo) = (ys[0], ys[1], ys[2], ys[3]);
    let (kco, ci, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    debug_assert_eq!(co, kco);
    let (h, w) = geom.in_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let kd = &k.values;
    let mut x = vec![0i32; n * ci * h * w];
    for in_ in 0..n {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = y[((in_ * co + oc) * ho + oh) * wo + ow];
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
                                x[xb + ih as usize * w + iw as usize] += g * kd[kb + u * kw + v];
                            }
                        }
                    }
                }
            }
        }
    }
    (x, vec![n, ci, h, w])
}

fn depthwise_i32(x: &[i32], xs: &[usize], k: &QuantizedTensor, geom: &ConvGeom) -> (Vec<i32>, Vec<usize>) {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (k.shape[2], k.shape[3]);
    debug_assert_eq!(k.shape[0], c);
    let (ho, wo) = geom.out_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let kd = &k.values;
    let mut y = vec![0i32; n * c * ho * wo];
    for in_ in 0..n {
        for ic in 0..c {
            let xb = ((in_ * c + ic) * h) * w;
            let kb = ic * kh * kw;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0i32;
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
                            acc += kd[kb + u * kw + v] * x[xb + ih as usize * w + iw as usize];
                        }
                    }
                    y[((in_ * c + ic) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    (y, vec![n, c, ho, wo])
}

fn depthwise_transpose_i32(y: &[i32], ys: &[usize], k: &QuantizedTensor, geom: &ConvGeom) -> (Vec<i32>, Vec<usize>) {
    let (n, c, ho, wo) = (ys[0], ys[1], ys[2], ys[3]);
    let (kh, kw) = (k.shape[2], k.shape[3]);
    debug_assert_eq!(k.shape[0], c);
    let (h, w) = geom.in_hw;
    let (ph, pw) = geom.pad;
    let s = geom.stride;
    let kd = &k.values;
    let mut x = vec![0i32; n * c * h * w];
    for in_ in 0..n {
        for ic in 0..c {
            let xb = ((in_ * c + ic) * h) * w;
            let kb = ic * kh * kw;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = y[((in_ * c + ic) * ho + oh) * wo + ow];
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
                            x[xb + ih as usize * w + iw as usize] += g * kd[kb + u * kw + v];
                        }
                    }
                }
            }
        }
    }
    (x, vec![n, c, h, w])
}

fn matmul_i32(x: &[i32], rows: usize, fin: usize, m: &QuantizedTensor, transpose: bool) -> Vec<i32> {
    let (mo, mi) = (m.shape[0], m.shape[1]);
    let (contract, out) = if transpose { (mo, mi) } else { (mi, mo) };
    debug_assert_eq!(fin, contract);
    let md = &m.values;
    let mut y = vec![0i32; rows * out];
    for ir in 0..rows {
        for io in 0..out {
            let mut acc = 0i32;
            for i in 0..contract {
                let mv = if transpose { md[i * mi + io] } else { md[io * mi + i] };
                acc += x[ir * fin + i] * mv;
            }
            y[ir * out + io] = acc;
        }
    }
    y
}

// ── exported image model ────────────────────────────────────────────────

/// One residual block reduced to integers: grid kernels, site scales, and
/// the float glue constants (`h`, fused smoothing scale, output width).
#[derive(Debug, Clone)]
struct ResData {
    index: usize,
    kind: BlockKind,
    h: f64,
    c_out: usize,
    kernels: Vec<QuantizedTensor>,
    sites: Vec<SitePars>,
    gamma: Option<f64>,
}

#[derive(Debug, Clone)]
enum IntBlock {
    Res(ResData),
    Pool,
}

/// A convolutional network in deployable form: full-precision stem and
/// head, integer trunk.
#[derive(Debug, Clone)]
pub struct IntImageModel {
    pub fingerprint: u64,
    opening: Tensor<f64>,
    input_site: SitePars,
    blocks: Vec<IntBlock>,
    cls_w: Tensor<f64>,
    cls_b: Tensor<f64>,
}

/// Output of an integer run: logits plus every site's grid indices, named
/// exactly like the float pass's quantization sites so the two can be
/// compared positionally.
pub struct IntRun {
    pub logits: Tensor<f64>,
    pub sites: Vec<SiteStream>,
}

pub struct SiteStream {
    pub name: String,
    pub values: Vec<i32>,
    pub site: SitePars,
}

/// Bounds every `i32` accumulator the block's integer convolutions can
/// produce: a sum over `fan` products of magnitudes `in_mag * R_k`.
/// `in_mag` is the largest index magnitude of the units entering each
/// convolution — the previous site's level count, times 4 per pooling
/// window folded in since.
fn audit_accumulators(index: usize, kind: BlockKind, kernels: &[QuantizedTensor], sites: &[SitePars], in_mag: i128) -> Result<()> {
    let r = |k: &QuantizedTensor| k.levels() as i128;
    let fan_in = |k: &QuantizedTensor| (k.shape[1] * k.shape[2] * k.shape[3]) as i128;
    let fan_out = |k: &QuantizedTensor| (k.shape[0] * k.shape[2] * k.shape[3]) as i128;
    let taps = |k: &QuantizedTensor| (k.shape[2] * k.shape[3]) as i128;
    let site = |j: usize| sites[j].levels() as i128;
    let bounds: Vec<i128> = match kind {
        BlockKind::PlainRes | BlockKind::ChannelChange(ResKind::Plain) => vec![
            in_mag * r(&kernels[1]) * fan_in(&kernels[1]),
            site(0) * r(&kernels[0]) * fan_in(&kernels[0]),
        ],
        BlockKind::SymRes | BlockKind::ChannelChange(ResKind::Symmetric) => vec![
            in_mag * r(&kernels[0]) * fan_in(&kernels[0]),
            site(0) * r(&kernels[0]) * fan_out(&kernels[0]),
        ],
        BlockKind::PlainMobile => vec![
            in_mag * r(&kernels[0]) * fan_in(&kernels[0]),
            site(0) * r(&kernels[1]) * taps(&kernels[1]),
            site(1) * r(&kernels[2]) * fan_in(&kernels[2]),
        ],
        // The composite `K2d K1` runs as two chained integer convolutions
        // with a single rescale, so the middle bound multiplies through.
        BlockKind::SymMobile => {
            let z = in_mag * r(&kernels[0]) * fan_in(&kernels[0]);
            let b = site(0) * r(&kernels[1]) * taps(&kernels[1]);
            vec![z * r(&kernels[1]) * taps(&kernels[1]), b * r(&kernels[0]) * fan_out(&kernels[0])]
        }
        _ => vec![],
    };
    if let Some(&worst) = bounds.iter().max() {
        if worst > i32::MAX as i128 {
            return Err(Error::arg(
                "export_int",
                format!("block {} can overflow 32-bit accumulators (worst sum bound {}); lower the bit widths", index, worst),
            ));
        }
    }
    Ok(())
}

/// Converts a trained, frozen network into integer form.
///
/// Preconditions, each checked: weights frozen onto their grids, every
/// residual block quantized, every activation site calibrated, no
/// standalone smoothing block in the trunk, and no convolution able to
/// overflow an `i32` accumulator.
pub fn export_image(net: &Network<f64>) -> Result<IntImageModel> {
    if !net.is_frozen() {
        return Err(Error::arg("export_int", "weights are not frozen onto the quantization grid; call freeze_quantized_weights first"));
    }
    let input_site = match &net.input_quant {
        Some(q) if q.enabled && q.initialized => SitePars::of(q),
        Some(_) => {
            return Err(Error::arg(
                "export_int",
                "the trunk-entry activation quantizer was never calibrated; run at least one quantized forward pass first",
            ))
        }
        None => return Err(Error::arg("export_int", "the network has no quantized blocks, so there is no integer grid to export")),
    };
    let mut blocks = Vec::new();
    let mut in_mag = input_site.levels() as i128;
    for index in net.trunk_range() {
        let block = &net.blocks[index];
        match block.spec.kind {
            BlockKind::AvgPool => {
                in_mag *= 4;
                if in_mag > i32::MAX as i128 {
                    return Err(Error::arg("export_int", format!("pooled units before block {} exceed the i32 range", index + 1)));
                }
                blocks.push(IntBlock::Pool);
            }
            BlockKind::Tv => {
                return Err(Error::arg(
                    "export_int",
                    format!(
                        "block {} applies standalone smoothing between quantization sites, which leaves the integer grid; \
                         fuse the smoothing into a residual block instead",
                        index
                    ),
                ));
            }
            BlockKind::PlainRes | BlockKind::SymRes | BlockKind::PlainMobile | BlockKind::SymMobile | BlockKind::ChannelChange(_) => {
                if block.spec.quant.is_none() {
                    return Err(Error::arg(
                        "export_int",
                        format!("block {} is full precision; every residual block must be quantized for integer evaluation", index),
                    ));
                }
                let mut sites = Vec::with_capacity(block.aq.len());
                for (j, q) in block.aq.iter().enumerate() {
                    if !q.enabled || !q.initialized {
                        return Err(Error::arg(
                            "export_int",
                            format!("activation quantizer b{}.a{} was never calibrated; run at least one quantized forward pass first", index, j),
                        ));
                    }
                    sites.push(SitePars::of(q));
                }
                let mut kernels = Vec::new();
                for (j, kernel) in kernels_of(&block.params).into_iter().enumerate() {
                    let q = &block.wq[j];
                    kernels.push(to_integer(kernel, q.alpha_value(), q.bits, true, &format!("b{}.k{}", index, j))?);
                }
                audit_accumulators(index, block.spec.kind, &kernels, &sites, in_mag)?;
                in_mag = sites.last().expect("residual blocks have sites").levels() as i128;
                blocks.push(IntBlock::Res(ResData {
                    index,
                    kind: block.spec.kind,
                    h: block.spec.h,
                    c_out: block.spec.c_out,
                    kernels,
                    sites,
                    gamma: block.gamma.as_ref().map(|g| g.data()[0]),
                }));
            }
            BlockKind::Opening | BlockKind::Classifier => {
                return Err(Error::BadBlockSpec { index, detail: "stem/head inside trunk".into() });
            }
        }
    }
    let crate::layers::BlockParams::Opening { k } = &net.blocks[0].params else {
        return Err(Error::BadBlockSpec { index: 0, detail: "first block must be the opening".into() });
    };
    let last = net.blocks.len() - 1;
    let crate::layers::BlockParams::Classifier { w, b } = &net.blocks[last].params else {
        return Err(Error::BadBlockSpec { index: last, detail: "last block must be the classifier".into() });
    };
    Ok(IntImageModel {
        fingerprint: net.fingerprint(),
        opening: k.clone(),
        input_site,
        blocks,
        cls_w: w.clone(),
        cls_b: b.clone(),
    })
}

impl ResData {
    fn site_units(&self, j: usize, value: &Tensor<f64>, streams: &mut Vec<SiteStream>) -> Units {
        let site = &self.sites[j];
        let u = Units::from_site(value, site);
        streams.push(SiteStream { name: format!("b{}.a{}", self.index, j), values: u.n.clone(), site: site.clone() });
        u
    }

    fn run(&self, x: &Units, streams: &mut Vec<SiteStream>) -> Result<Units> {
        let x_deq = x.deq();
        match self.kind {
            // x + h K1 sigma(K2 x)
            BlockKind::PlainRes => {
                let (k1, k2) = (&self.kernels[0], &self.kernels[1]);
                let g2 = same_geom(&x.shape, &k2.shape)?;
                let (s, ss) = conv2d_i32(&x.n, &x.shape, k2, &g2);
                let u = rescale(s, ss, x.step() * kernel_step(k2));
                let a = self.site_units(0, &rectify(&u, self.gamma)?, streams);
                let g1 = same_geom(&a.shape, &k1.shape)?;
                let (s, ss) = conv2d_i32(&a.n, &a.shape, k1, &g1);
                let v = rescale(s, ss, a.step() * kernel_step(k1));
                let y = x_deq.zip_map(&v, "residual", |xv, vv| xv + vv * self.h)?;
                Ok(self.site_units(1, &y, streams))
            }
            // x - h K^T sigma(K x)
            BlockKind::SymRes => {
                let k = &self.kernels[0];
                let g = same_geom(&x.shape, &k.shape)?;
                let (s, ss) = conv2d_i32(&x.n, &x.shape, k, &g);
                let u = rescale(s, ss, x.step() * kernel_step(k));
                let a = self.site_units(0, &rectify(&u, self.gamma)?, streams);
                let (s, ss) = conv2d_transpose_i32(&a.n, &a.shape, k, &g);
                let v = rescale(s, ss, a.step() * kernel_step(k));
                let y = x_deq.zip_map(&v, "residual", |xv, vv| xv - vv * self.h)?;
                Ok(self.site_units(1, &y, streams))
            }
            // x + K3 sigma(K2d sigma(K1 x)), no step factor
            BlockKind::PlainMobile => {
                let (k1, kd, k3) = (&self.kernels[0], &self.kernels[1], &self.kernels[2]);
                let g1 = same_geom(&x.shape, &k1.shape)?;
                let (s, ss) = conv2d_i32(&x.n, &x.shape, k1, &g1);
                let u1 = rescale(s, ss, x.step() * kernel_step(k1));
                let a1 = self.site_units(0, &rectify(&u1, self.gamma)?, streams);
                let gd = same_geom(&a1.shape, &kd.shape)?;
                let (s, ss) = depthwise_i32(&a1.n, &a1.shape, kd, &gd);
                let u2 = rescale(s, ss, a1.step() * kernel_step(kd));
                let a2 = self.site_units(1, &rectify(&u2, self.gamma)?, streams);
                let g3 = same_geom(&a2.shape, &k3.shape)?;
                let (s, ss) = conv2d_i32(&a2.n, &a2.shape, k3, &g3);
                let v = rescale(s, ss, a2.step() * kernel_step(k3));
                let y = x_deq.zip_map(&v, "residual", |xv, vv| xv + vv)?;
                Ok(self.site_units(2, &y, streams))
            }
            // x - K1^T K2d^T sigma(K2d K1 x); the chained convolutions stay
            // integer and share one rescale.
            BlockKind::SymMobile => {
                let (k1, kd) = (&self.kernels[0], &self.kernels[1]);
                let g1 = same_geom(&x.shape, &k1.shape)?;
                let gd = same_geom(&x.shape, &kd.shape)?;
                let (z, zs) = conv2d_i32(&x.n, &x.shape, k1, &g1);
                let (z2, z2s) = depthwise_i32(&z, &zs, kd, &gd);
                let u = rescale(z2, z2s, x.step() * kernel_step(k1) * kernel_step(kd));
                let a = self.site_units(0, &rectify(&u, self.gamma)?, streams);
                let (b1, b1s) = depthwise_transpose_i32(&a.n, &a.shape, kd, &gd);
                let (s, ss) = conv2d_transpose_i32(&b1, &b1s, k1, &g1);
                let v = rescale(s, ss, a.step() * kernel_step(kd) * kernel_step(k1));
                let y = x_deq.zip_map(&v, "residual", |xv, vv| xv - vv)?;
                Ok(self.site_units(1, &y, streams))
            }
            // Residual step at the input width, concatenated with copied
            // input channels, one signed site over the widened output.
            BlockKind::ChannelChange(inner) => {
                let r_val = match inner {
                    ResKind::Symmetric => {
                        let k = &self.kernels[0];
                        let g = same_geom(&x.shape, &k.shape)?;
                        let (s, ss) = conv2d_i32(&x.n, &x.shape, k, &g);
                        let u = rescale(s, ss, x.step() * kernel_step(k));
                        let a = self.site_units(0, &rectify(&u, self.gamma)?, streams);
                        let (s, ss) = conv2d_transpose_i32(&a.n, &a.shape, k, &g);
                        let v = rescale(s, ss, a.step() * kernel_step(k));
                        x_deq.zip_map(&v, "residual", |xv, vv| xv - vv * self.h)?
                    }
                    ResKind::Plain => {
                        let (k1, k2) = (&self.kernels[0], &self.kernels[1]);
                        let g2 = same_geom(&x.shape, &k2.shape)?;
                        let (s, ss) = conv2d_i32(&x.n, &x.shape, k2, &g2);
                        let u = rescale(s, ss, x.step() * kernel_step(k2));
                        let a = self.site_units(0, &rectify(&u, self.gamma)?, streams);
                        let g1 = same_geom(&a.shape, &k1.shape)?;
                        let (s, ss) = conv2d_i32(&a.n, &a.shape, k1, &g1);
                        let v = rescale(s, ss, a.step() * kernel_step(k1));
                        x_deq.zip_map(&v, "residual", |xv, vv| xv + vv * self.h)?
                    }
                };
                let c_in = x.shape[1];
                let y = if self.c_out > c_in {
                    ops::concat_channels(&r_val, &ops::slice_channels(&x_deq, self.c_out - c_in)?)?
                } else {
                    r_val
                };
                Ok(self.site_units(1, &y, streams))
            }
            _ => Err(Error::BadBlockSpec { index: self.index, detail: "not a residual block".into() }),
        }
    }
}

impl IntImageModel {
    /// Runs the trunk on integers; stem and head in full precision, exactly
    /// as the float network computes them.
    pub fn forward_image(&self, input: &Tensor<f64>) -> Result<IntRun> {
        let geom = same_geom(input.shape(), self.opening.shape())?;
        let x0 = ops::conv2d(input, &self.opening, &geom)?.map(|v| v.max(0.0));
        let mut units = Units::from_site(&x0, &self.input_site);
        let mut streams =
            vec![SiteStream { name: "input".to_string(), values: units.n.clone(), site: self.input_site.clone() }];
        for block in &self.blocks {
            units = match block {
                IntBlock::Pool => units.pool()?,
                IntBlock::Res(r) => r.run(&units, &mut streams)?,
            };
        }
        let logits = ops::linear(&ops::global_avg_pool(&units.deq())?, &self.cls_w, Some(&self.cls_b))?;
        Ok(IntRun { logits, sites: streams })
    }
}

// ── exported graph model ────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct IntGcnLayer {
    kernels: Vec<QuantizedTensor>,
    sites: [SitePars; 2],
}

/// A diffusion network in deployable form. The graph operator is not part
/// of the model — inference binds it at call time, so one exported model
/// serves any graph with compatible feature width.
#[derive(Debug, Clone)]
pub struct IntGraphModel {
    pub fingerprint: u64,
    kind: GcnKind,
    h: f64,
    embed: Tensor<f64>,
    layers: Vec<IntGcnLayer>,
    cls_w: Tensor<f64>,
    cls_b: Tensor<f64>,
}

pub fn export_graph(net: &GraphNetwork<f64>) -> Result<IntGraphModel> {
    if !net.is_frozen() {
        return Err(Error::arg("export_int", "weights are not frozen onto the quantization grid; call freeze_quantized_weights first"));
    }
    if net.spec.quant.is_none() {
        return Err(Error::arg("export_int", "the network has no quantized layers, so there is no integer grid to export"));
    }
    let width = net.spec.width as i128;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate() {
        let index = li + 1;
        let mut sites = Vec::with_capacity(2);
        for (j, q) in net.aq[li].iter().enumerate() {
            if !q.enabled || !q.initialized {
                return Err(Error::arg(
                    "export_int",
                    format!("activation quantizer b{}.a{} was never calibrated; run at least one quantized forward pass first", index, j),
                ));
            }
            sites.push(SitePars::of(q));
        }
        let raw: Vec<&Tensor<f64>> = match layer {
            GcnLayer::Sym { k } => vec![k],
            GcnLayer::Nonsym { k1, k2 } => vec![k1, k2],
        };
        let mut kernels = Vec::with_capacity(raw.len());
        for (j, kernel) in raw.into_iter().enumerate() {
            let q = &net.wq[li][j];
            kernels.push(to_integer(kernel, q.alpha_value(), q.bits, true, &format!("b{}.k{}", index, j))?);
        }
        for (j, k) in kernels.iter().enumerate() {
            let bound = sites[j].levels() as i128 * k.levels() as i128 * width;
            if bound > i32::MAX as i128 {
                return Err(Error::arg(
                    "export_int",
                    format!("layer {} can overflow 32-bit accumulators (worst sum bound {}); lower the bit widths", index, bound),
                ));
            }
        }
        let sites: [SitePars; 2] = sites.try_into().map_err(|_| Error::arg("export_int", "diffusion layers carry two sites"))?;
        layers.push(IntGcnLayer { kernels, sites });
    }
    Ok(IntGraphModel {
        fingerprint: net.fingerprint(),
        kind: net.spec.kind,
        h: net.spec.h,
        embed: net.embed.clone(),
        layers,
        cls_w: net.cls_w.clone(),
        cls_b: net.cls_b.clone(),
    })
}

impl IntGraphModel {
    /// Embedding and operator applications in float, feature mixings on
    /// integers — mirroring the float layer `x - h S^T K^T sigma(K S x)`
    /// (or its two-kernel variant) expression for expression.
    pub fn forward_graph(&self, op: &GraphOperator<f64>, features: &Tensor<f64>) -> Result<IntRun> {
        let mut x = ops::feature_matmul(features, &self.embed, false)?.map(|v| v.max(0.0));
        let mut streams = Vec::new();
        let rows = op.n_edges();
        let width = self.embed.shape()[0];
        for (li, layer) in self.layers.iter().enumerate() {
            let index = li + 1;
            let sx = op.apply(&x)?;
            let n0 = Units::from_site(&sx, &layer.sites[0]);
            streams.push(SiteStream { name: format!("b{}.a0", index), values: n0.n.clone(), site: layer.sites[0].clone() });
            let u = matmul_i32(&n0.n, rows, width, &layer.kernels[0], false);
            let u = rescale(u, vec![rows, width], n0.step() * kernel_step(&layer.kernels[0]));
            let a = u.map(|v| v.max(0.0));
            let n1 = Units::from_site(&a, &layer.sites[1]);
            streams.push(SiteStream { name: format!("b{}.a1", index), values: n1.n.clone(), site: layer.sites[1].clone() });
            let (second, transpose) = match self.kind {
                GcnKind::Sym => (&layer.kernels[0], true),
                GcnKind::Nonsym => (&layer.kernels[1], false),
            };
            let v = matmul_i32(&n1.n, rows, width, second, transpose);
            let v = rescale(v, vec![rows, width], n1.step() * kernel_step(second));
            let w = op.apply_t(&v)?;
            x = x.zip_map(&w, "residual", |xv, wv| xv - wv * self.h)?;
        }
        let logits = ops::linear(&x, &self.cls_w, Some(&self.cls_b))?;
        Ok(IntRun { logits, sites: streams })
    }
}

// ── model files ─────────────────────────────────────────────────────────
//
// Same container format as checkpoints. `meta.kind` distinguishes image
// (0) from graph (1) models; kernels store their grid indices plus scale
// and width, sites store scale plus width and signedness. The architecture
// itself is not serialized — loading takes the spec and verifies the
// embedded fingerprint against it.

fn push_site(c: &mut Container, name: &str, site: &SitePars) -> Result<()> {
    c.push_f64(&format!("{}.alpha", name), &[1], vec![site.alpha])?;
    c.push_i32(&format!("{}.meta", name), &[2], vec![site.bits as i32, site.signed as i32])
}

fn read_site(c: &Container, name: &str) -> Result<SitePars> {
    let (_, alpha) = c.f64_record(&format!("{}.alpha", name))?;
    let (_, meta) = c.i32_record(&format!("{}.meta", name))?;
    if meta.len() != 2 {
        return Err(Error::BadData(format!("site {}: malformed metadata", name)));
    }
    let (bits, signed) = (meta[0] as u32, meta[1] != 0);
    quant::levels(bits, signed)?;
    if !(alpha[0] > 0.0) {
        return Err(Error::BadData(format!("site {}: clip scale must be positive, got {}", name, alpha[0])));
    }
    Ok(SitePars { alpha: alpha[0], bits, signed })
}

fn push_grid_kernel(c: &mut Container, base: &str, k: &QuantizedTensor) -> Result<()> {
    c.push_i32(&format!("{}.q", base), &k.shape, k.values.clone())?;
    c.push_f64(&format!("{}.alpha", base), &[1], vec![k.alpha])?;
    c.push_i32(&format!("{}.meta", base), &[1], vec![k.bits as i32])
}

fn read_grid_kernel(c: &Container, base: &str, expect_shape: &[usize]) -> Result<QuantizedTensor> {
    let (dims, values) = c.i32_record(&format!("{}.q", base))?;
    if dims != expect_shape {
        return Err(Error::BadData(format!("kernel {}: stored shape {:?} does not match the architecture's {:?}", base, dims, expect_shape)));
    }
    let (_, alpha) = c.f64_record(&format!("{}.alpha", base))?;
    let (_, meta) = c.i32_record(&format!("{}.meta", base))?;
    if meta.len() != 1 {
        return Err(Error::BadData(format!("kernel {}: malformed metadata", base)));
    }
    let bits = meta[0] as u32;
    let r = quant::levels(bits, true)? as i32;
    if !(alpha[0] > 0.0) {
        return Err(Error::BadData(format!("kernel {}: clip scale must be positive, got {}", base, alpha[0])));
    }
    if let Some(&bad) = values.iter().find(|v| v.abs() > r) {
        return Err(Error::BadData(format!("kernel {}: index {} exceeds the {}-bit grid", base, bad, bits)));
    }
    Ok(QuantizedTensor { values: values.to_vec(), shape: dims.to_vec(), bits, signed: true, alpha: alpha[0] })
}

fn read_f64_tensor(c: &Container, name: &str, expect_shape: &[usize]) -> Result<Tensor<f64>> {
    let (dims, values) = c.f64_record(name)?;
    if dims != expect_shape {
        return Err(Error::BadData(format!("record {}: stored shape {:?} does not match the architecture's {:?}", name, dims, expect_shape)));
    }
    Tensor::new(dims.to_vec(), values.to_vec())
}

/// Kernel shapes a block's architecture dictates, in slot order.
fn kernel_shapes(spec: &BlockSpec) -> Vec<Vec<usize>> {
    let (c, k) = (spec.c_in, spec.kernel);
    match spec.kind {
        BlockKind::PlainRes | BlockKind::ChannelChange(ResKind::Plain) => vec![vec![c, c, k, k], vec![c, c, k, k]],
        BlockKind::SymRes | BlockKind::ChannelChange(ResKind::Symmetric) => vec![vec![c, c, k, k]],
        BlockKind::PlainMobile => vec![vec![c, c, 1, 1], vec![c, 1, k, k], vec![c, c, 1, 1]],
        BlockKind::SymMobile => vec![vec![c, c, 1, 1], vec![c, 1, k, k]],
        _ => vec![],
    }
}

fn site_count(kind: BlockKind) -> usize {
    match kind {
        BlockKind::PlainRes | BlockKind::SymRes | BlockKind::SymMobile | BlockKind::ChannelChange(_) => 2,
        BlockKind::PlainMobile => 3,
        _ => 0,
    }
}

pub fn save_int_image_model(model: &IntImageModel, path: &Path) -> Result<()> {
    let mut c = Container::new(model.fingerprint);
    c.push_i32("meta.kind", &[1], vec![0])?;
    c.push_f64("b0.k0", model.opening.shape(), model.opening.data().to_vec())?;
    push_site(&mut c, "input", &model.input_site)?;
    for block in &model.blocks {
        if let IntBlock::Res(r) = block {
            for (j, k) in r.kernels.iter().enumerate() {
                push_grid_kernel(&mut c, &format!("b{}.k{}", r.index, j), k)?;
            }
            for (j, s) in r.sites.iter().enumerate() {
                push_site(&mut c, &format!("b{}.a{}", r.index, j), s)?;
            }
            if let Some(g) = r.gamma {
                c.push_f64(&format!("b{}.gamma", r.index), &[1], vec![g])?;
            }
        }
    }
    c.push_f64("head.w", model.cls_w.shape(), model.cls_w.data().to_vec())?;
    c.push_f64("head.b", model.cls_b.shape(), model.cls_b.data().to_vec())?;
    c.save(path)
}

pub fn load_int_image_model(specs: &[BlockSpec], path: &Path) -> Result<IntImageModel> {
    let c = Container::load(path)?;
    let expected = fingerprint(specs);
    if c.fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: c.fingerprint });
    }
    let (_, kind) = c.i32_record("meta.kind")?;
    if kind != [0] {
        return Err(Error::BadData("the file holds a graph model, not an image model".into()));
    }
    if specs.len() < 2 {
        return Err(Error::BadData("architecture needs at least an opening and a classifier".into()));
    }
    let stem = &specs[0];
    let opening = read_f64_tensor(&c, "b0.k0", &[stem.c_out, stem.c_in, stem.kernel, stem.kernel])?;
    let input_site = read_site(&c, "input")?;
    let mut blocks = Vec::new();
    for (index, spec) in specs.iter().enumerate().take(specs.len() - 1).skip(1) {
        match spec.kind {
            BlockKind::AvgPool => blocks.push(IntBlock::Pool),
            BlockKind::Tv => return Err(Error::BadData(format!("block {} is a standalone smoothing step, which integer models cannot hold", index))),
            BlockKind::Opening | BlockKind::Classifier => {
                return Err(Error::BadData(format!("block {}: stem/head inside trunk", index)));
            }
            _ => {
                let mut kernels = Vec::new();
                for (j, shape) in kernel_shapes(spec).iter().enumerate() {
                    kernels.push(read_grid_kernel(&c, &format!("b{}.k{}", index, j), shape)?);
                }
                let sites_n = site_count(spec.kind);
                let mut sites = Vec::with_capacity(sites_n);
                for j in 0..sites_n {
                    let s = read_site(&c, &format!("b{}.a{}", index, j))?;
                    if s.signed != (j + 1 == sites_n) {
                        return Err(Error::BadData(format!("site b{}.a{}: signedness does not match its position", index, j)));
                    }
                    sites.push(s);
                }
                let gamma = match spec.tv_gamma {
                    Some(_) => Some(c.f64_record(&format!("b{}.gamma", index))?.1[0]),
                    None => None,
                };
                blocks.push(IntBlock::Res(ResData { index, kind: spec.kind, h: spec.h, c_out: spec.c_out, kernels, sites, gamma }));
            }
        }
    }
    let head = &specs[specs.len() - 1];
    let cls_w = read_f64_tensor(&c, "head.w", &[head.c_out, head.c_in])?;
    let cls_b = read_f64_tensor(&c, "head.b", &[head.c_out])?;
    Ok(IntImageModel { fingerprint: c.fingerprint, opening, input_site, blocks, cls_w, cls_b })
}

pub fn save_int_graph_model(model: &IntGraphModel, path: &Path) -> Result<()> {
    let mut c = Container::new(model.fingerprint);
    c.push_i32("meta.kind", &[1], vec![1])?;
    c.push_f64("b0.k0", model.embed.shape(), model.embed.data().to_vec())?;
    for (li, layer) in model.layers.iter().enumerate() {
        let index = li + 1;
        for (j, k) in layer.kernels.iter().enumerate() {
            push_grid_kernel(&mut c, &format!("b{}.k{}", index, j), k)?;
        }
        for (j, s) in layer.sites.iter().enumerate() {
            push_site(&mut c, &format!("b{}.a{}", index, j), s)?;
        }
    }
    c.push_f64("head.w", model.cls_w.shape(), model.cls_w.data().to_vec())?;
    c.push_f64("head.b", model.cls_b.shape(), model.cls_b.data().to_vec())?;
    c.save(path)
}

pub fn load_int_graph_model(spec: &GcnSpec, path: &Path) -> Result<IntGraphModel> {
    let c = Container::load(path)?;
    let expected = gcn_fingerprint(spec);
    if c.fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: c.fingerprint });
    }
    let (_, kind) = c.i32_record("meta.kind")?;
    if kind != [1] {
        return Err(Error::BadData("the file holds an image model, not a graph model".into()));
    }
    let embed = read_f64_tensor(&c, "b0.k0", &[spec.width, spec.features_in])?;
    let per_layer = match spec.kind {
        GcnKind::Sym => 1,
        GcnKind::Nonsym => 2,
    };
    let mut layers = Vec::with_capacity(spec.layers);
    for li in 0..spec.layers {
        let index = li + 1;
        let mut kernels = Vec::with_capacity(per_layer);
        for j in 0..per_layer {
            kernels.push(read_grid_kernel(&c, &format!("b{}.k{}", index, j), &[spec.width, spec.width])?);
        }
        let s0 = read_site(&c, &format!("b{}.a0", index))?;
        let s1 = read_site(&c, &format!("b{}.a1", index))?;
        if !s0.signed || s1.signed {
            return Err(Error::BadData(format!("layer {}: site signedness does not match its position", index)));
        }
        layers.push(IntGcnLayer { kernels, sites: [s0, s1] });
    }
    let cls_w = read_f64_tensor(&c, "head.w", &[spec.classes, spec.width])?;
    let cls_b = read_f64_tensor(&c, "head.b", &[spec.classes])?;
    Ok(IntGraphModel { fingerprint: c.fingerprint, kind: spec.kind, h: spec.h, embed, layers, cls_w, cls_b })
}

// ── integer-vs-float verification ───────────────────────────────────────

/// Result of holding an integer run against its float twin: every site's
/// grid indices compared element by element, plus the largest logit gap.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCheck {
    pub sites: usize,
    pub compared: usize,
    pub mismatches: usize,
    pub max_logit_gap: f64,
}

fn diff_runs(run: &IntRun, float_sites: &[(String, Tensor<f64>)], float_logits: &Tensor<f64>) -> Result<GridCheck> {
    if float_sites.len() != run.sites.len() {
        return Err(Error::arg(
            "grid_check",
            format!("float pass has {} quantization sites, integer run has {}", float_sites.len(), run.sites.len()),
        ));
    }
    let mut compared = 0;
    let mut mismatches = 0;
    for ((name, value), stream) in float_sites.iter().zip(&run.sites) {
        if name != &stream.name {
            return Err(Error::arg("grid_check", format!("site order diverged: float {} vs integer {}", name, stream.name)));
        }
        let q = to_integer(value, stream.site.alpha, stream.site.bits, stream.site.signed, name)?;
        compared += q.values.len();
        mismatches += q.values.iter().zip(&stream.values).filter(|(a, b)| a != b).count();
    }
    if float_logits.shape() != run.logits.shape() {
        return Err(Error::shape("grid_check", format!("{:?} vs {:?}", float_logits.shape(), run.logits.shape())));
    }
    let max_logit_gap =
        float_logits.data().iter().zip(run.logits.data()).map(|(&a, &b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(GridCheck { sites: run.sites.len(), compared, mismatches, max_logit_gap })
}

/// Runs both engines on the same inputs and diffs every quantization site.
///
/// The engines agree bit for bit except when a pre-rounding value sits
/// within a few ulps of a rounding midpoint, where the index is genuinely
/// ambiguous at f64 precision. Trained clip scales are generic and never
/// land there; a freshly percentile-calibrated scale, however, is itself
/// one of the lattice values the site later quantizes, so exact rational
/// relations (a value equal to half the scale, say) can park values on
/// midpoints. Compare trained checkpoints, not merely calibrated ones.
pub fn compare_image(model: &IntImageModel, net: &mut Network<f64>, inputs: &Tensor<f64>) -> Result<GridCheck> {
    let run = model.forward_image(inputs)?;
    let tape = Tape::new();
    let iv = tape.constant(inputs.clone());
    let pass = net.forward(&tape, iv, QuantMode::FULL)?;
    let float_sites: Vec<(String, Tensor<f64>)> =
        pass.qsites.iter().map(|(name, var)| (name.clone(), tape.value(*var).clone())).collect();
    let logits = tape.value(pass.output).clone();
    diff_runs(&run, &float_sites, &logits)
}

pub fn compare_graph(model: &IntGraphModel, net: &mut GraphNetwork<f64>, features: &Tensor<f64>) -> Result<GridCheck> {
    let op = net.operator.clone();
    let run = model.forward_graph(op.as_ref(), features)?;
    let tape = Tape::new();
    let fv = tape.constant(features.clone());
    let pass = net.forward(&tape, fv, QuantMode::FULL)?;
    let float_sites: Vec<(String, Tensor<f64>)> =
        pass.qsites.iter().map(|(name, var)| (name.clone(), tape.value(*var).clone())).collect();
    let logits = tape.value(pass.output).clone();
    diff_runs(&run, &float_sites, &logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sbm, SbmParams};
    use crate::graph::build_graph_network;
    use crate::layers::{build_network, QuantSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn calibrate(net: &mut Network<f64>, inputs: &Tensor<f64>) {
        let tape = Tape::new();
        let iv = tape.constant(inputs.clone());
        net.forward(&tape, iv, QuantMode::FULL).unwrap();
    }

    fn calibrate_graph(net: &mut GraphNetwork<f64>, features: &Tensor<f64>) {
        let tape = Tape::new();
        let fv = tape.constant(features.clone());
        net.forward(&tape, fv, QuantMode::FULL).unwrap();
    }

    // Freshly calibrated activation scales are exact lattice values of the
    // sites they quantize (see [`compare_image`]), so an untrained network
    // can park values exactly on rounding midpoints. Training moves the
    // scales off the lattice; these tests emulate that with a distinct tiny
    // factor per site.
    fn nudge_site_scales(net: &mut Network<f64>) {
        let mut k = 1.0;
        for block in &mut net.blocks {
            for q in &mut block.aq {
                q.alpha.data_mut()[0] *= 1.0 + k * 1e-7;
                k += 1.0;
            }
        }
    }

    fn nudge_graph_site_scales(net: &mut GraphNetwork<f64>) {
        let mut k = 1.0;
        for layer in &mut net.aq {
            for q in layer {
                q.alpha.data_mut()[0] *= 1.0 + k * 1e-7;
                k += 1.0;
            }
        }
    }

    fn mixed_specs() -> Vec<BlockSpec> {
        vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(4, 8).with_tv(0.01).with_h(0.4),
            BlockSpec::new(BlockKind::ChannelChange(ResKind::Plain), 4, 6).with_quant(4, 8).with_h(0.3),
            BlockSpec::new(BlockKind::AvgPool, 6, 6),
            BlockSpec::new(BlockKind::PlainRes, 6, 6).with_quant(4, 8),
            BlockSpec::new(BlockKind::Classifier, 6, 3),
        ]
    }

    #[test]
    fn site_indices_reconstruct_the_float_quantizer_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[64], 0.9, &mut rng);
        for &(bits, signed) in &[(8u32, false), (4, true), (3, false)] {
            let site = SitePars { alpha: 0.7310000000000001, bits, signed };
            let grid = if signed {
                quant::fake_quant_weights(&x, site.alpha, bits).unwrap()
            } else {
                quant::fake_quant_activations(&x, site.alpha, bits).unwrap()
            };
            let units = Units::from_site(&x, &site);
            assert_eq!(units.deq(), grid, "{} bits signed={}", bits, signed);
        }
    }

    #[test]
    fn pooled_units_average_exactly() {
        // 0.2, 0.4, 0.6, 0.8 sit on the 4-bit unsigned grid (alpha 1), so
        // the pooled value must equal their mean with no rounding at all.
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let site = SitePars { alpha: 1.0, bits: 4, signed: false };
        let units = Units::from_site(&x, &site);
        let pooled = units.pool().unwrap();
        assert_eq!(pooled.n, vec![3 + 6 + 9 + 12]);
        assert_eq!(pooled.div, 4.0);
        assert_eq!(pooled.deq().data(), &[0.5]);
    }

    #[test]
    fn integer_trunk_reproduces_float_sites_bit_for_bit() {
        let mut net = build_network::<f64>(&mixed_specs(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let calib = Tensor::<f64>::uniform(&[6, 1, 8, 8], 0.0, 1.0, &mut rng);
        calibrate(&mut net, &calib);
        nudge_site_scales(&mut net);
        net.freeze_quantized_weights().unwrap();
        let model = export_image(&net).unwrap();
        let fresh = Tensor::<f64>::uniform(&[5, 1, 8, 8], 0.0, 1.0, &mut rng);
        let check = compare_image(&model, &mut net, &fresh).unwrap();
        assert_eq!(check.sites, 7, "input site plus two per residual block");
        assert!(check.compared > 0);
        assert_eq!(check.mismatches, 0, "every grid index must agree");
        assert!(check.max_logit_gap < 1e-9, "logit gap {}", check.max_logit_gap);
    }

    #[test]
    fn mobile_blocks_hold_the_grid() {
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::PlainMobile, 4, 4).with_quant(4, 8),
            BlockSpec::new(BlockKind::SymMobile, 4, 4).with_quant(4, 8),
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        let mut net = build_network::<f64>(&specs, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let calib = Tensor::<f64>::uniform(&[4, 1, 8, 8], 0.0, 1.0, &mut rng);
        calibrate(&mut net, &calib);
        nudge_site_scales(&mut net);
        net.freeze_quantized_weights().unwrap();
        let model = export_image(&net).unwrap();
        let fresh = Tensor::<f64>::uniform(&[4, 1, 8, 8], 0.0, 1.0, &mut rng);
        let check = compare_image(&model, &mut net, &fresh).unwrap();
        assert_eq!(check.sites, 1 + 3 + 2);
        assert_eq!(check.mismatches, 0);
        assert!(check.max_logit_gap < 1e-9);
    }

    #[test]
    fn graph_layers_hold_the_grid() {
        let params = SbmParams { nodes: 30, blocks: 3, p_intra: 0.6, p_inter: 0.1, features: 4, noise: 0.3, ..SbmParams::default() };
        let ds = generate_sbm::<f64>(&params, 7).unwrap();
        // Evaluate on jittered features rather than the calibration batch,
        // mirroring deployment.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let jitter = Tensor::<f64>::uniform(ds.graph.features.shape(), -0.05, 0.05, &mut rng);
        let fresh = ds.graph.features.zip_map(&jitter, "jitter", |a, b| a + b).unwrap();
        for kind in [GcnKind::Sym, GcnKind::Nonsym] {
            let spec = GcnSpec {
                kind,
                layers: 2,
                features_in: 4,
                width: 8,
                classes: 3,
                h: 0.4,
                quant: Some(QuantSpec { bits_w: 4, bits_a: 8 }),
            };
            let mut net = build_graph_network::<f64>(&spec, &ds.graph, 9).unwrap();
            calibrate_graph(&mut net, &ds.graph.features);
            nudge_graph_site_scales(&mut net);
            net.freeze_quantized_weights().unwrap();
            let model = export_graph(&net).unwrap();
            let check = compare_graph(&model, &mut net, &fresh).unwrap();
            assert_eq!(check.sites, 4, "{:?}", kind);
            assert_eq!(check.mismatches, 0, "{:?}", kind);
            assert!(check.max_logit_gap < 1e-9, "{:?}: {}", kind, check.max_logit_gap);
        }
    }

    #[test]
    fn export_refuses_unfrozen_or_uncalibrated_networks() {
        let mut net = build_network::<f64>(&mixed_specs(), 1).unwrap();
        let err = export_image(&net).unwrap_err();
        assert!(err.to_string().contains("frozen"), "{}", err);

        // Freezing without ever running a forward pass leaves the
        // activation scales at their defaults — refuse those too.
        net.freeze_quantized_weights().unwrap();
        let err = export_image(&net).unwrap_err();
        assert!(err.to_string().contains("calibrated"), "{}", err);
    }

    #[test]
    fn export_refuses_blocks_off_the_grid_path() {
        // A full-precision residual block breaks the integer chain.
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(4, 8),
            BlockSpec::new(BlockKind::PlainRes, 4, 4),
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        let mut net = build_network::<f64>(&specs, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        calibrate(&mut net, &Tensor::<f64>::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng));
        net.freeze_quantized_weights().unwrap();
        let err = export_image(&net).unwrap_err();
        assert!(err.to_string().contains("full precision"), "{}", err);

        // So does a standalone smoothing step between sites.
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(4, 8),
            BlockSpec::new(BlockKind::Tv, 4, 4).with_tv(0.01),
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        let mut net = build_network::<f64>(&specs, 2).unwrap();
        calibrate(&mut net, &Tensor::<f64>::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng));
        net.freeze_quantized_weights().unwrap();
        let err = export_image(&net).unwrap_err();
        assert!(err.to_string().contains("smoothing"), "{}", err);
    }

    #[test]
    fn export_rejects_kernels_off_their_grid() {
        let mut net = build_network::<f64>(&mixed_specs(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        calibrate(&mut net, &Tensor::<f64>::uniform(&[3, 1, 8, 8], 0.0, 1.0, &mut rng));
        net.freeze_quantized_weights().unwrap();
        // The kernels are snapped to the 4-bit grid; claiming 8 bits
        // afterwards must be caught rather than silently re-gridded.
        net.set_bits(8, 8).unwrap();
        match export_image(&net) {
            Err(Error::OffGrid { name, .. }) => assert_eq!(name, "b1.k0"),
            other => panic!("expected OffGrid, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn export_guards_integer_overflow() {
        // 15-bit weights and activations over a 3x3, 4-channel kernel bound
        // the accumulator by 32767 * 16383 * 36, past the i32 range.
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            BlockSpec::new(BlockKind::SymRes, 4, 4).with_quant(15, 15),
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        let mut net = build_network::<f64>(&specs, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        calibrate(&mut net, &Tensor::<f64>::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng));
        net.freeze_quantized_weights().unwrap();
        let err = export_image(&net).unwrap_err();
        assert!(err.to_string().contains("overflow"), "{}", err);
    }

    #[test]
    fn model_files_round_trip_and_verify_identity() {
        let dir = std::env::temp_dir().join(format!("sqnt-int-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let specs = mixed_specs();
        let mut net = build_network::<f64>(&specs, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let calib = Tensor::<f64>::uniform(&[6, 1, 8, 8], 0.0, 1.0, &mut rng);
        calibrate(&mut net, &calib);
        net.freeze_quantized_weights().unwrap();
        let model = export_image(&net).unwrap();
        let path = dir.join("image.sqnt");
        save_int_image_model(&model, &path).unwrap();

        let loaded = load_int_image_model(&specs, &path).unwrap();
        let inputs = Tensor::<f64>::uniform(&[3, 1, 8, 8], 0.0, 1.0, &mut rng);
        let a = model.forward_image(&inputs).unwrap();
        let b = loaded.forward_image(&inputs).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        for (sa, sb) in a.sites.iter().zip(&b.sites) {
            assert_eq!(sa.name, sb.name);
            assert_eq!(sa.values, sb.values);
        }

        // A different architecture must be refused by fingerprint.
        let mut other = specs.clone();
        other.truncate(other.len() - 2);
        other.push(BlockSpec::new(BlockKind::Classifier, 6, 3));
        match load_int_image_model(&other, &path) {
            Err(Error::FingerprintMismatch { .. }) => {}
            other => panic!("expected FingerprintMismatch, got {:?}", other.map(|_| ())),
        }

        // Same fingerprint but the wrong model family is caught by the
        // kind record.
        let mut fake = Container::new(fingerprint(&specs));
        fake.push_i32("meta.kind", &[1], vec![1]).unwrap();
        let fake_path = dir.join("fake.sqnt");
        fake.save(&fake_path).unwrap();
        match load_int_image_model(&specs, &fake_path) {
            Err(Error::BadData(msg)) => assert!(msg.contains("graph model"), "{}", msg),
            other => panic!("expected BadData, got {:?}", other.map(|_| ())),
        }

        // Graph model round trip, same checks.
        let params = SbmParams { nodes: 24, blocks: 2, p_intra: 0.6, p_inter: 0.1, features: 4, noise: 0.3, ..SbmParams::default() };
        let ds = generate_sbm::<f64>(&params, 5).unwrap();
        let spec = GcnSpec {
            kind: GcnKind::Nonsym,
            layers: 2,
            features_in: 4,
            width: 6,
            classes: 2,
            h: 0.3,
            quant: Some(QuantSpec { bits_w: 4, bits_a: 8 }),
        };
        let mut gnet = build_graph_network::<f64>(&spec, &ds.graph, 8).unwrap();
        calibrate_graph(&mut gnet, &ds.graph.features);
        gnet.freeze_quantized_weights().unwrap();
        let gmodel = export_graph(&gnet).unwrap();
        let gpath = dir.join("graph.sqnt");
        save_int_graph_model(&gmodel, &gpath).unwrap();
        let gloaded = load_int_graph_model(&spec, &gpath).unwrap();
        let ga = gmodel.forward_graph(gnet.operator.as_ref(), &ds.graph.features).unwrap();
        let gb = gloaded.forward_graph(gnet.operator.as_ref(), &ds.graph.features).unwrap();
        assert_eq!(ga.logits.data(), gb.logits.data());

        let narrower = GcnSpec { width: 5, ..spec.clone() };
        match load_int_graph_model(&narrower, &gpath) {
            Err(Error::FingerprintMismatch { .. }) => {}
            other => panic!("expected FingerprintMismatch, got {:?}", other.map(|_| ())),
        }

        std::fs::remove_dir_all(&dir).ok();
    }
}

