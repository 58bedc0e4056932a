//! Diffusive graph convolution over a fixed edge-incidence operator.
//!
//! Node features live on the graph; one shared operator `S` (edges x
//! nodes) maps them to edge space, where learnable channel-mixing matrices
//! act. The symmetric layer `x - h S^T K^T sigma(K S x)` mirrors the
//! symmetric CNN block: the same `K` appears forward and adjoint, so the
//! step is non-expansive whenever `h < 2 / |K S|^2`, with half the
//! parameters of the non-symmetric form `x - h S^T K2 sigma(K1 S x)`.
//!
//! `S` is degree-normalized so `|S^T S| <= 2` (the normalized-Laplacian
//! bound): the row for edge `(u, v)` holds `-c / sqrt(d(u))` at `u` and
//! `+c / sqrt(d(v))` at `v`. Quantization enters at the mixing-matrix
//! boundaries only — the edge features entering `K` (signed) and the
//! rectified features entering the second mixing (unsigned); applying `S`
//! itself stays in float, like the residual adds of the CNN path.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{CustomVjp, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{fnv1a64, ActSites, ParamKey, QuantSpec, QuantMode, Slot};
use crate::quant::{self, Quantizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── graph topology ──────────────────────────────────────────────────────

/// Undirected simple graph with per-node features.
#[derive(Debug, Clone)]
pub struct Graph<T: Scalar> {
    pub n: usize,
    /// Canonicalized edge list: `u < v`, sorted, no duplicates.
    pub edges: Vec<(usize, usize)>,
    /// Node features, shape `[n, f]`.
    pub features: Tensor<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, features: Tensor<T>) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != n {
            return Err(Error::BadData(format!(
                "features must be [n, f] with n = {}, got {:?}",
                n,
                features.shape()
            )));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::BadData(format!("edge ({}, {}) outside {} nodes", u, v, n)));
            }
            if u == v {
                return Err(Error::BadData(format!("self-loop at node {}", u)));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        let before = canon.len();
        canon.dedup();
        if canon.len() != before {
            return Err(Error::BadData("duplicate edges in graph".to_string()));
        }
        Ok(Graph { n, edges: canon, features })
    }

    pub fn feature_width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.n];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Connected-component count (reported for diagnostics; nothing
    /// requires connectivity).
    pub fn components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(u, v) in &self.edges {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru] = rv;
            }
        }
        (0..self.n).filter(|&i| find(&mut parent, i) == i).count()
    }
}

/// Parses "u v" pairs, one per line; `#`-prefixed lines and blanks are
/// skipped.
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.ok_or_else(|| Error::BadData(format!("edge list line {}: expected \"u v\"", lineno + 1)))?
                .parse()
                .map_err(|_| Error::BadData(format!("edge list line {}: not a node id", lineno + 1)))
        };
        let u = parse(it.next())?;
        let v = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::BadData(format!("edge list line {}: trailing tokens", lineno + 1)));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

pub fn format_edge_list(edges: &[(usize, usize)]) -> String {
    let mut out = String::new();
    for &(u, v) in edges {
        out.push_str(&format!("{} {}\n", u, v));
    }
    out
}

// ── incidence operator ──────────────────────────────────────────────────

/// Degree-normalized incidence operator `S` (edges x nodes), applied
/// feature-column-wise: `(S x)[e] = cu[e] x[u] + cv[e] x[v]`.
#[derive(Debug, Clone)]
pub struct GraphOperator<T: Scalar> {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    cu: Vec<T>,
    cv: Vec<T>,
}

impl<T: Scalar> GraphOperator<T> {
    /// Builds `S` from a graph with global scale `c` (1 keeps
    /// `|S^T S| <= 2`).
    pub fn new(graph: &Graph<T>, c: f64) -> Self {
        let d = graph.degrees();
        let mut cu = Vec::with_capacity(graph.edges.len());
        let mut cv = Vec::with_capacity(graph.edges.len());
        for &(u, v) in &graph.edges {
            cu.push(T::of(-c / (d[u] as f64).sqrt()));
            cv.push(T::of(c / (d[v] as f64).sqrt()));
        }
        GraphOperator { n_nodes: graph.n, edges: graph.edges.clone(), cu, cv }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// `S x`: node features `[n, f]` to edge features `[E, f]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.check_rows("apply", x, self.n_nodes)?;
        let mut y = Tensor::zeros(&[self.edges.len(), f]);
        let xd = x.data();
        let yd = y.data_mut();
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            for j in 0..f {
                yd[e * f + j] = self.cu[e] * xd[u * f + j] + self.cv[e] * xd[v * f + j];
            }
        }
        Ok(y)
    }

    /// `S^T y`: edge features `[E, f]` back to nodes `[n, f]`. Literal
    /// scatter of the same coefficients, so `<S x, y> == <x, S^T y>` up to
    /// float rounding.
    pub fn apply_t(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.check_rows("apply_t", y, self.edges.len())?;
        let mut x = Tensor::zeros(&[self.n_nodes, f]);
        let yd = y.data();
        let xd = x.data_mut();
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            for j in 0..f {
                xd[u * f + j] += self.cu[e] * yd[e * f + j];
                xd[v * f + j] += self.cv[e] * yd[e * f + j];
            }
        }
        Ok(x)
    }

    fn check_rows(&self, op: &'static str, t: &Tensor<T>, rows: usize) -> Result<usize> {
        match t.shape() {
            &[r, f] if r == rows => Ok(f),
            s => Err(Error::shape(op, format!("expected [{}, f], got {:?}", rows, s))),
        }
    }
}

struct IncidenceRule<T: Scalar> {
    op: Rc<GraphOperator<T>>,
    transpose: bool,
}

impl<T: Scalar> CustomVjp<T> for IncidenceRule<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let dx = if self.transpose { self.op.apply(g) } else { self.op.apply_t(g) };
        vec![Some(dx.expect("shape fixed by forward"))]
    }
}

/// Records `S x` on the tape (backward applies `S^T`).
pub fn incidence<T: Scalar>(tape: &Tape<T>, x: Var, op: &Rc<GraphOperator<T>>) -> Result<Var> {
    let y = op.apply(&tape.value(x))?;
    Ok(tape.custom(&[x], y, Rc::new(IncidenceRule { op: op.clone(), transpose: false })))
}

/// Records `S^T y` on the tape (backward applies `S`).
pub fn incidence_t<T: Scalar>(tape: &Tape<T>, y: Var, op: &Rc<GraphOperator<T>>) -> Result<Var> {
    let x = op.apply_t(&tape.value(y))?;
    Ok(tape.custom(&[y], x, Rc::new(IncidenceRule { op: op.clone(), transpose: true })))
}

// ── diffusion layers ────────────────────────────────────────────────────

/// `x - h S^T K^T sigma(K S x)`. Quantization sites: 0 = signed, on the
/// edge features entering `K`; 1 = unsigned, on the rectified features
/// entering `K^T`.
pub fn gcn_sym_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    s: &Rc<GraphOperator<T>>,
    k: Var,
    h: T,
    sites: &mut ActSites<'_, T>,
) -> Result<Var> {
    let sx = incidence(tape, x, s)?;
    let sx = sites.quant(0, sx)?;
    let u = tape.feature_matmul(sx, k, false)?;
    let a = tape.relu(u);
    let a = sites.quant(1, a)?;
    let v = tape.feature_matmul(a, k, true)?;
    let w = incidence_t(tape, v, s)?;
    tape.sub(x, tape.scale(w, h))
}

/// `x - h S^T K2 sigma(K1 S x)`: two independent mixings. Setting
/// `K1 = K` and `K2 = K^T` (materialized) reproduces the symmetric layer
/// bit for bit. Sites as in [`gcn_sym_forward`].
pub fn gcn_nonsym_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    s: &Rc<GraphOperator<T>>,
    k1: Var,
    k2: Var,
    h: T,
    sites: &mut ActSites<'_, T>,
) -> Result<Var> {
    let sx = incidence(tape, x, s)?;
    let sx = sites.quant(0, sx)?;
    let u = tape.feature_matmul(sx, k1, false)?;
    let a = tape.relu(u);
    let a = sites.quant(1, a)?;
    let v = tape.feature_matmul(a, k2, false)?;
    let w = incidence_t(tape, v, s)?;
    tape.sub(x, tape.scale(w, h))
}

/// Per-node affine map to class logits.
pub fn node_classifier<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.linear(x, w, Some(b))
}

// ── network ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcnKind {
    Sym,
    Nonsym,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnSpec {
    pub kind: GcnKind,
    pub layers: usize,
    pub features_in: usize,
    pub width: usize,
    pub classes: usize,
    pub h: f64,
    pub quant: Option<QuantSpec>,
}

#[derive(Debug, Clone)]
pub(crate) enum GcnLayer<T: Scalar> {
    Sym { k: Tensor<T> },
    Nonsym { k1: Tensor<T>, k2: Tensor<T> },
}

/// Embedding, a stack of diffusion layers over one shared operator, and a
/// node classifier. Parameter keys reuse the block scheme: the embedding
/// is block 0, layer `i` is block `i + 1`, the head is the last block.
#[derive(Debug, Clone)]
pub struct GraphNetwork<T: Scalar> {
    pub spec: GcnSpec,
    pub operator: Rc<GraphOperator<T>>,
    pub(crate) embed: Tensor<T>,
    pub(crate) layers: Vec<GcnLayer<T>>,
    pub(crate) wq: Vec<Vec<Quantizer<T>>>,
    pub(crate) aq: Vec<Vec<Quantizer<T>>>,
    pub(crate) cls_w: Tensor<T>,
    pub(crate) cls_b: Tensor<T>,
    frozen: bool,
}

/// Same role as the CNN pass: logits plus taps, keyed parameters, and
/// named quantized-activation sites.
pub struct GraphForwardPass {
    pub output: Var,
    pub taps: Vec<Var>,
    pub params: Vec<(ParamKey, Var)>,
    pub qsites: Vec<(String, Var)>,
}

pub fn build_graph_network<T: Scalar>(spec: &GcnSpec, graph: &Graph<T>, seed: u64) -> Result<GraphNetwork<T>> {
    if spec.layers == 0 {
        return Err(Error::arg("build_graph_network", "at least one diffusion layer"));
    }
    if spec.width == 0 || spec.classes < 2 {
        return Err(Error::arg("build_graph_network", "width >= 1 and classes >= 2"));
    }
    if spec.h <= 0.0 {
        return Err(Error::arg("build_graph_network", "step size must be strictly positive"));
    }
    if spec.features_in != graph.feature_width() {
        return Err(Error::shape(
            "build_graph_network",
            format!("spec expects {} input features, graph has {}", spec.features_in, graph.feature_width()),
        ));
    }
    if let Some(q) = spec.quant {
        quant::levels(q.bits_w, true)?;
        quant::levels(q.bits_a, false)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = Tensor::randn(&[spec.width, spec.features_in], T::of((2.0 / spec.features_in as f64).sqrt()), &mut rng);
    let kstd = T::of((1.0 / spec.width as f64).sqrt());
    let mut layers = Vec::with_capacity(spec.layers);
    let mut wq = Vec::new();
    let mut aq = Vec::new();
    for _ in 0..spec.layers {
        let layer = match spec.kind {
            GcnKind::Sym => GcnLayer::Sym { k: Tensor::randn(&[spec.width, spec.width], kstd, &mut rng) },
            GcnKind::Nonsym => GcnLayer::Nonsym {
                k1: Tensor::randn(&[spec.width, spec.width], kstd, &mut rng),
                k2: Tensor::randn(&[spec.width, spec.width], kstd, &mut rng),
            },
        };
        let (lwq, laq) = match spec.quant {
            Some(q) => {
                let kernels: Vec<&Tensor<T>> = match &layer {
                    GcnLayer::Sym { k } => vec![k],
                    GcnLayer::Nonsym { k1, k2 } => vec![k1, k2],
                };
                let lwq = kernels.into_iter().map(|k| Quantizer::for_weights(q.bits_w, k)).collect::<Result<Vec<_>>>()?;
                // Site 0 sees signed edge differences; site 1 rectified values.
                let laq = vec![Quantizer::for_activations(q.bits_a, true)?, Quantizer::for_activations(q.bits_a, false)?];
                (lwq, laq)
            }
            None => (vec![], vec![]),
        };
        layers.push(layer);
        wq.push(lwq);
        aq.push(laq);
    }
    let cls_std = T::of((1.0 / spec.width as f64).sqrt());
    let cls_w = Tensor::randn(&[spec.classes, spec.width], cls_std, &mut rng);
    let cls_b = Tensor::zeros(&[spec.classes]);
    Ok(GraphNetwork {
        spec: spec.clone(),
        operator: Rc::new(GraphOperator::new(graph, 1.0)),
        embed,
        layers,
        wq,
        aq,
        cls_w,
        cls_b,
        frozen: false,
    })
}

/// Architecture fingerprint of a diffusion-network spec; checkpoint and
/// export files embed it so mismatched loads are refused.
pub fn gcn_fingerprint(spec: &GcnSpec) -> u64 {
    let kind = match spec.kind {
        GcnKind::Sym => "gcn_sym",
        GcnKind::Nonsym => "gcn_nonsym",
    };
    let quant = match spec.quant {
        Some(q) => format!("w{}a{}", q.bits_w, q.bits_a),
        None => "fp".to_string(),
    };
    fnv1a64(&format!(
        "{};{};{};{};{};{:016x};{}",
        kind, spec.layers, spec.features_in, spec.width, spec.classes, spec.h.to_bits(), quant
    ))
}

impl<T: Scalar> GraphNetwork<T> {
    pub fn fingerprint(&self) -> u64 {
        gcn_fingerprint(&self.spec)
    }

    /// Kernels per diffusion layer: 1 symmetric, 2 non-symmetric.
    pub fn kernel_count_per_layer(&self) -> usize {
        match self.spec.kind {
            GcnKind::Sym => 1,
            GcnKind::Nonsym => 2,
        }
    }

    /// Runs embedding, diffusion stack, and head over node features.
    pub fn forward(&mut self, tape: &Tape<T>, features: Var, mode: QuantMode) -> Result<GraphForwardPass> {
        let mut params: Vec<(ParamKey, Var)> = Vec::new();
        let mut qsites: Vec<(String, Var)> = Vec::new();
        let mut taps: Vec<Var> = Vec::new();

        let ev = tape.param(&self.embed);
        params.push((ParamKey::Block { index: 0, slot: Slot::K0 }, ev));
        let mut x = tape.relu(tape.feature_matmul(features, ev, false)?);

        let kernel_slots = [Slot::K0, Slot::K1];
        for li in 0..self.layers.len() {
            let index = li + 1;
            let kernels: Vec<Tensor<T>> = match &self.layers[li] {
                GcnLayer::Sym { k } => vec![k.clone()],
                GcnLayer::Nonsym { k1, k2 } => vec![k1.clone(), k2.clone()],
            };
            let mut kvars = Vec::with_capacity(kernels.len());
            for (i, kernel) in kernels.iter().enumerate() {
                let kv = tape.param(kernel);
                params.push((ParamKey::Block { index, slot: kernel_slots[i] }, kv));
                let effective = if mode.weights && self.wq[li].get(i).map(|q| q.enabled).unwrap_or(false) {
                    let normed = tape.weight_normalize(kv)?;
                    let alpha = tape.param(&self.wq[li][i].alpha);
                    params.push((ParamKey::Block { index, slot: Slot::AlphaW(i as u8) }, alpha));
                    quant::fake_quant_var(tape, normed, alpha, self.wq[li][i].bits, true)?
                } else {
                    kv
                };
                kvars.push(effective);
            }
            let mut sites = ActSites::new(tape, &mut self.aq[li], None, mode.acts);
            let h = T::of(self.spec.h);
            x = match self.spec.kind {
                GcnKind::Sym => gcn_sym_forward(tape, x, &self.operator, kvars[0], h, &mut sites)?,
                GcnKind::Nonsym => gcn_nonsym_forward(tape, x, &self.operator, kvars[0], kvars[1], h, &mut sites)?,
            };
            for ev in sites.events {
                params.push((ParamKey::Block { index, slot: Slot::AlphaA(ev.site as u8) }, ev.alpha));
                qsites.push((format!("b{}.a{}", index, ev.site), ev.quantized));
            }
            taps.push(x);
        }

        let index = self.layers.len() + 1;
        let wv = tape.param(&self.cls_w);
        let bv = tape.param(&self.cls_b);
        params.push((ParamKey::Block { index, slot: Slot::ClsW }, wv));
        params.push((ParamKey::Block { index, slot: Slot::ClsB }, bv));
        let output = node_classifier(tape, x, wv, bv)?;
        Ok(GraphForwardPass { output, taps, params, qsites })
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        let ParamKey::Block { index, slot } = key else { return None };
        if index == 0 {
            return match slot {
                Slot::K0 => Some(&mut self.embed),
                _ => None,
            };
        }
        let head = self.layers.len() + 1;
        if index == head {
            return match slot {
                Slot::ClsW => Some(&mut self.cls_w),
                Slot::ClsB => Some(&mut self.cls_b),
                _ => None,
            };
        }
        let li = index - 1;
        match (slot, self.layers.get_mut(li)?) {
            (Slot::K0, GcnLayer::Sym { k }) => Some(k),
            (Slot::K0, GcnLayer::Nonsym { k1, .. }) => Some(k1),
            (Slot::K1, GcnLayer::Nonsym { k2, .. }) => Some(k2),
            (Slot::AlphaW(i), _) => self.wq[li].get_mut(i as usize).map(|q| &mut q.alpha),
            (Slot::AlphaA(i), _) => self.aq[li].get_mut(i as usize).map(|q| &mut q.alpha),
            _ => None,
        }
    }

    pub fn visit_params(&self, mut f: impl FnMut(ParamKey, &Tensor<T>)) {
        f(ParamKey::Block { index: 0, slot: Slot::K0 }, &self.embed);
        let kernel_slots = [Slot::K0, Slot::K1];
        for (li, layer) in self.layers.iter().enumerate() {
            let index = li + 1;
            let kernels: Vec<&Tensor<T>> = match layer {
                GcnLayer::Sym { k } => vec![k],
                GcnLayer::Nonsym { k1, k2 } => vec![k1, k2],
            };
            for (i, k) in kernels.into_iter().enumerate() {
                f(ParamKey::Block { index, slot: kernel_slots[i] }, k);
            }
            for (i, q) in self.wq[li].iter().enumerate() {
                f(ParamKey::Block { index, slot: Slot::AlphaW(i as u8) }, &q.alpha);
            }
            for (i, q) in self.aq[li].iter().enumerate() {
                f(ParamKey::Block { index, slot: Slot::AlphaA(i as u8) }, &q.alpha);
            }
        }
        let index = self.layers.len() + 1;
        f(ParamKey::Block { index, slot: Slot::ClsW }, &self.cls_w);
        f(ParamKey::Block { index, slot: Slot::ClsB }, &self.cls_b);
    }

    /// Element count of diffusion-layer parameters (the sym-vs-nonsym
    /// comparison excludes the shared embedding and head).
    pub fn layer_param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(|key, t| {
            if let ParamKey::Block { index, .. } = key {
                if index >= 1 && index <= self.layers.len() {
                    total += t.numel();
                }
            }
        });
        total
    }

    pub fn set_bits(&mut self, bits_w: u32, bits_a: u32) -> Result<()> {
        quant::levels(bits_w, true)?;
        quant::levels(bits_a, false)?;
        for lwq in &mut self.wq {
            for q in lwq {
                q.bits = bits_w;
            }
        }
        for laq in &mut self.aq {
            for q in laq {
                q.bits = bits_a;
            }
        }
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Restores the frozen flag when loading a checkpoint whose mixing
    /// matrices were already snapped to the grid before saving.
    pub(crate) fn mark_frozen(&mut self) {
        self.frozen = true;
    }

    /// Flattened quantizer state for checkpointing: activation-calibration
    /// flags and weight-quantizer enabled flags, layer by layer.
    pub(crate) fn quantizer_flags(&self) -> (Vec<i32>, Vec<i32>) {
        let aq = self.aq.iter().flatten().map(|q| q.initialized as i32).collect();
        let wq = self.wq.iter().flatten().map(|q| q.enabled as i32).collect();
        (aq, wq)
    }

    pub(crate) fn restore_quantizer_flags(&mut self, aq_init: &[i32], wq_enabled: &[i32]) -> Result<()> {
        let na: usize = self.aq.iter().map(|l| l.len()).sum();
        let nw: usize = self.wq.iter().map(|l| l.len()).sum();
        if aq_init.len() != na || wq_enabled.len() != nw {
            return Err(Error::BadData("quantizer flag count mismatch".into()));
        }
        for (q, &f) in self.aq.iter_mut().flatten().zip(aq_init) {
            q.initialized = f != 0;
        }
        for (q, &f) in self.wq.iter_mut().flatten().zip(wq_enabled) {
            q.enabled = f != 0;
        }
        Ok(())
    }

    /// Snaps every quantized mixing matrix to its grid and disables the
    /// weight quantizers; see the CNN counterpart for rationale.
    pub fn freeze_quantized_weights(&mut self) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        for li in 0..self.layers.len() {
            if self.wq[li].is_empty() {
                continue;
            }
            let kernels: Vec<Tensor<T>> = match &self.layers[li] {
                GcnLayer::Sym { k } => vec![k.clone()],
                GcnLayer::Nonsym { k1, k2 } => vec![k1.clone(), k2.clone()],
            };
            for (i, kernel) in kernels.iter().enumerate() {
                if !self.wq[li][i].enabled {
                    continue;
                }
                let normed = quant::normalize_weights(kernel)?;
                let snapped = quant::fake_quant_weights(&normed, self.wq[li][i].alpha_value(), self.wq[li][i].bits)?;
                self.wq[li][i].enabled = false;
                match &mut self.layers[li] {
                    GcnLayer::Sym { k } => *k = snapped,
                    GcnLayer::Nonsym { k1, k2 } => {
                        if i == 0 {
                            *k1 = snapped;
                        } else {
                            *k2 = snapped;
                        }
                    }
                }
            }
        }
        self.frozen = true;
        Ok(())
    }
}
