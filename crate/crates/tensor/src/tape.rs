//! Operation tape: every forward call records its inputs and geometry so that
//! [`Tape::backward`] can replay the analytic adjoints in reverse creation order.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::ops::conv::{self, ConvGeom};
use crate::ops::corr::{self, LookupGeom};
use crate::ops::deform::{self, DeformGeom};
use crate::ops::loss::{self, EuForm};
use crate::ops::pointwise::Pointwise;
use crate::ops::pool;
use crate::ops::sample::{self, SampleGeom};
use crate::tensor::{check_finite, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied adjoint for an op recorded with [`Tape::custom`].
pub trait CustomBackward: Send + Sync {
    /// Gradient for each input given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d { geom: ConvGeom, x: Var, w: Var, b: Var },
    Sample { geom: SampleGeom, x: Var, coords: Var },
    AvgPool2 { planes: usize, h: usize, w: usize, x: Var },
    InstanceNorm { size: usize, inv: Vec<f64>, x: Var },
    Pointwise { kind: Pointwise, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat { parts: Vec<(Var, usize)>, batch: usize, plane: usize },
    Sum(Var),
    Corr { batch: usize, dim: usize, npix: usize, a: Var, b: Var },
    Lookup { geom: LookupGeom, levels: Vec<Var>, flow: Vec<f64> },
    Deform { geom: DeformGeom, inputs: [Var; 5] },
    EuLoss { form: EuForm, batch: usize, ch: usize, npix: usize, s: Var, g: Var, lv: Var },
    Custom { inputs: Vec<Var>, adjoint: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation. One tape per patch; tapes are never shared.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, needs_grad))
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [batch, in_ch, height, width] = self.value(x).dims4(OP)?;
        let [out_ch, wc, kh, kw] = self.value(w).dims4(OP)?;
        if wc != in_ch {
            return Err(TensorError::dim(OP, format!("input channels (axis 1) {in_ch} vs weight channels (axis 1) {wc}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::dim(OP, format!("kernel extents (axes 2,3) must be equal and odd, got {kh}×{kw}")));
        }
        if self.value(b).shape() != [out_ch] {
            return Err(TensorError::dim(OP, format!("bias shape {:?} vs output channels (axis 0) {out_ch}", self.shape(b))));
        }
        if stride == 0 {
            return Err(TensorError::dim(OP, "stride must be ≥ 1"));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(TensorError::dim(OP, format!("input {height}×{width} (axes 2,3) smaller than kernel {kh} with padding {padding}")));
        }
        let geom = ConvGeom { batch, in_ch, height, width, out_ch, kernel: kh, stride, padding };
        let (ho, wo) = geom.out_hw();
        let data = conv::forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        self.record(OP, vec![batch, out_ch, ho, wo], data, Op::Conv2d { geom, x, w, b }, &[x, w, b])
    }

    /// Samples `x: [B,C,H,W]` at absolute positions `coords: [B,2,H',W']` (channel 0 = x,
    /// channel 1 = y), clamping out-of-range positions to the border.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        const OP: &str = "bilinear_sample";
        let [batch, channels, height, width] = self.value(x).dims4(OP)?;
        let [cb, two, out_h, out_w] = self.value(coords).dims4(OP)?;
        if cb != batch || two != 2 {
            return Err(TensorError::dim(OP, format!("coords shape {:?} must be [{batch},2,H',W'] (axes 0,1)", self.shape(coords))));
        }
        let geom = SampleGeom { batch, channels, height, width, out_h, out_w };
        let data = sample::forward(&geom, self.value(x).data(), self.value(coords).data());
        self.record(OP, vec![batch, channels, out_h, out_w], data, Op::Sample { geom, x, coords }, &[x, coords])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "avg_pool2";
        let [b, c, h, w] = self.value(x).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(TensorError::dim(OP, format!("extents (axes 2,3) must be even and nonzero, got {h}×{w}")));
        }
        let data = pool::avg_pool2_forward(b * c, h, w, self.value(x).data());
        self.record(OP, vec![b, c, h / 2, w / 2], data, Op::AvgPool2 { planes: b * c, h, w, x }, &[x])
    }

    /// Standardises every `[H, W]` plane to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        const OP: &str = "instance_norm";
        let [b, c, h, w] = self.value(x).dims4(OP)?;
        if h * w == 0 || !(eps > 0.0) {
            return Err(TensorError::Domain { op: OP, detail: format!("needs nonempty planes and eps > 0, got {h}×{w}, eps {eps}") });
        }
        let (data, inv) = pool::instance_norm_forward(b * c, h * w, eps, self.value(x).data());
        self.record(OP, vec![b, c, h, w], data, Op::InstanceNorm { size: h * w, inv, x }, &[x])
    }

    pub fn pointwise(&mut self, x: Var, kind: Pointwise) -> Result<Var> {
        let input = self.value(x);
        if kind == Pointwise::Log {
            if let Some(i) = input.data().iter().position(|&v| v <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {} at flat index {i}", input.data()[i]),
                });
            }
        }
        let data = input.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = input.shape().to_vec();
        self.record(kind.name(), shape, data, Op::Pointwise { kind, x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Exp)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record("scale", shape, data, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.record("add_scalar", shape, data, Op::AddScalar(x), &[x])
    }

    /// Elementwise clamp; the gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        self.record("clamp", shape, data, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Concatenates `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = *parts.first().ok_or_else(|| TensorError::dim(OP, "no operands"))?;
        let [batch, _, h, w] = self.value(first).dims4(OP)?;
        let mut sized = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).dims4(OP)?;
            if (pb, ph, pw) != (batch, h, w) {
                return Err(TensorError::dim(
                    OP,
                    format!("operand {:?} disagrees with {:?} on axes 0,2,3", self.shape(p), self.shape(first)),
                ));
            }
            sized.push((p, pc));
        }
        let plane = h * w;
        let total_c: usize = sized.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(batch * total_c * plane);
        for b in 0..batch {
            for &(p, c) in &sized {
                data.extend_from_slice(&self.value(p).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        self.record(OP, vec![batch, total_c, h, w], data, Op::Concat { parts: sized, batch, plane }, parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.record("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// All-pairs inner products of two `[B, D, h, w]` maps, returned as `[B, h·w, h, w]`:
    /// channel `i·w + j` is the correlation of source pixel `(i, j)` with every target pixel.
    pub fn correlation(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "correlation";
        same_shape(OP, self.value(a), self.value(b))?;
        let [batch, dim, h, w] = self.value(a).dims4(OP)?;
        let npix = h * w;
        let data = corr::corr_forward(batch, dim, npix, self.value(a).data(), self.value(b).data());
        self.record(OP, vec![batch, npix, h, w], data, Op::Corr { batch, dim, npix, a, b }, &[a, b])
    }

    /// Multi-level correlation lookup. `levels[l]` is `[B, h·w, h_l, w_l]`; `flow` is a
    /// constant `[B, 2, h, w]` field whose positions are divided by `2^l` at level `l`.
    pub fn lookup(&mut self, levels: &[Var], flow: &Tensor, radius: usize) -> Result<Var> {
        const OP: &str = "lookup";
        let [batch, two, height, width] = flow.dims4(OP)?;
        if two != 2 {
            return Err(TensorError::dim(OP, format!("flow must have 2 channels (axis 1), got {two}")));
        }
        if radius == 0 {
            return Err(TensorError::Domain { op: OP, detail: "radius must be ≥ 1".into() });
        }
        let mut dims = Vec::with_capacity(levels.len());
        for &l in levels {
            let [lb, lc, lh, lw] = self.value(l).dims4(OP)?;
            if lb != batch || lc != height * width || lh == 0 || lw == 0 {
                return Err(TensorError::dim(
                    OP,
                    format!("level shape {:?} must be [{batch},{},h_l,w_l] (axes 0,1)", self.shape(l), height * width),
                ));
            }
            dims.push((lh, lw));
        }
        let geom = LookupGeom { batch, height, width, radius, levels: dims };
        let slices: Vec<&[f64]> = levels.iter().map(|&l| self.value(l).data()).collect();
        let data = corr::lookup_forward(&geom, &slices, flow.data());
        let shape = vec![batch, geom.out_channels(), height, width];
        let op = Op::Lookup { geom, levels: levels.to_vec(), flow: flow.data().to_vec() };
        self.record(OP, shape, data, op, levels)
    }

    /// Modulated deformable convolution; see [`crate::ops::deform`] for layouts.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, mask: Var, w: Var, b: Var, groups: usize) -> Result<Var> {
        const OP: &str = "deform_conv2d";
        let [batch, in_ch, height, width] = self.value(x).dims4(OP)?;
        let [out_ch, wc, kh, kw] = self.value(w).dims4(OP)?;
        if wc != in_ch || kh != kw || kh % 2 == 0 {
            return Err(TensorError::dim(OP, format!("weight {:?} incompatible with {in_ch} input channels (axis 1)", self.shape(w))));
        }
        if groups == 0 || in_ch % groups != 0 {
            return Err(TensorError::dim(OP, format!("{in_ch} channels (axis 1) not divisible into {groups} groups")));
        }
        let taps = kh * kw;
        if self.shape(offsets) != [batch, 2 * groups * taps, height, width] {
            return Err(TensorError::dim(OP, format!("offsets shape {:?}, want [{batch},{},{height},{width}]", self.shape(offsets), 2 * groups * taps)));
        }
        if self.shape(mask) != [batch, groups * taps, height, width] {
            return Err(TensorError::dim(OP, format!("mask shape {:?}, want [{batch},{},{height},{width}]", self.shape(mask), groups * taps)));
        }
        if self.shape(b) != [out_ch] {
            return Err(TensorError::dim(OP, format!("bias shape {:?} vs {out_ch} outputs (axis 0)", self.shape(b))));
        }
        let geom = DeformGeom { batch, in_ch, height, width, out_ch, kernel: kh, groups };
        let data = deform::forward(
            &geom,
            self.value(x).data(),
            self.value(offsets).data(),
            self.value(mask).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let inputs = [x, offsets, mask, w, b];
        self.record(OP, vec![batch, out_ch, height, width], data, Op::Deform { geom, inputs }, &inputs)
    }

    /// Uncertainty-weighted loss of prediction `s` against target `g` (`[B,C,H,W]`) with
    /// per-pixel log-variance `log_var` (`[B,1,H,W]`), averaged over pixels.
    pub fn eu_loss(&mut self, s: Var, g: Var, log_var: Var, form: EuForm) -> Result<Var> {
        const OP: &str = "eu_loss";
        same_shape(OP, self.value(s), self.value(g))?;
        let [batch, ch, h, w] = self.value(s).dims4(OP)?;
        if self.shape(log_var) != [batch, 1, h, w] {
            return Err(TensorError::dim(OP, format!("log-variance shape {:?}, want [{batch},1,{h},{w}]", self.shape(log_var))));
        }
        let npix = h * w;
        let l = loss::eu_forward(form, batch, ch, npix, self.value(s).data(), self.value(g).data(), self.value(log_var).data());
        self.record(OP, vec![1], vec![l], Op::EuLoss { form, batch, ch, npix, s, g, lv: log_var }, &[s, g, log_var])
    }

    /// Records an externally computed value with a caller-provided adjoint.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, adjoint: Box<dyn CustomBackward>) -> Result<Var> {
        let shape = output.shape().to_vec();
        let data = output.into_data();
        self.record("custom", shape, data, Op::Custom { inputs: inputs.to_vec(), adjoint }, inputs)
    }

    /// Reverse sweep from the scalar `loss`. Intermediate gradients are released as soon
    /// as they have been propagated; only leaf gradients are returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::dim("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, dg) in self.adjoint(node, &g) {
                if let Some(dg) = dg {
                    if !self.nodes[input.0].needs_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(dg),
                    }
                }
            }
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, node: &Node, g: &[f64]) -> Vec<(Var, Option<Vec<f64>>)> {
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { geom, x, w, b } => {
                let r = conv::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    [self.want(*x), self.want(*w), self.want(*b)],
                );
                vec![(*x, r.dx), (*w, r.dw), (*b, r.db)]
            }
            Op::Sample { geom, x, coords } => {
                let (dx, dc) = sample::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*coords).data(),
                    g,
                    [self.want(*x), self.want(*coords)],
                );
                vec![(*x, dx), (*coords, dc)]
            }
            Op::AvgPool2 { planes, h, w, x } => vec![(*x, Some(pool::avg_pool2_backward(*planes, *h, *w, g)))],
            Op::InstanceNorm { size, inv, x } => {
                vec![(*x, Some(pool::instance_norm_backward(*size, node.value.data(), inv, g)))]
            }
            Op::Pointwise { kind, x } => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let d = g
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                vec![(*x, Some(d))]
            }
            Op::Add(a, b) => vec![(*a, Some(g.to_vec())), (*b, Some(g.to_vec()))],
            Op::Sub(a, b) => vec![(*a, Some(g.to_vec())), (*b, Some(g.iter().map(|v| -v).collect()))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, self.want(*a).then(|| g.iter().zip(bv).map(|(g, b)| g * b).collect())),
                    (*b, self.want(*b).then(|| g.iter().zip(av).map(|(g, a)| g * a).collect())),
                ]
            }
            Op::Scale(x, c) => vec![(*x, Some(g.iter().map(|v| v * c).collect()))],
            Op::AddScalar(x) => vec![(*x, Some(g.to_vec()))],
            Op::Clamp { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                    .collect();
                vec![(*x, Some(d))]
            }
            Op::Concat { parts, batch, plane } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&(p, c)| {
                        let mut d = Vec::with_capacity(batch * c * plane);
                        for b in 0..*batch {
                            let start = (b * total + offset) * plane;
                            d.extend_from_slice(&g[start..start + c * plane]);
                        }
                        offset += c;
                        (p, Some(d))
                    })
                    .collect()
            }
            Op::Sum(x) => vec![(*x, Some(vec![g[0]; self.value(*x).numel()]))],
            Op::Corr { batch, dim, npix, a, b } => {
                let (da, db) = corr::corr_backward(
                    *batch,
                    *dim,
                    *npix,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    [self.want(*a), self.want(*b)],
                );
                vec![(*a, da), (*b, db)]
            }
            Op::Lookup { geom, levels, flow } => {
                let d = corr::lookup_backward(geom, flow, g);
                levels.iter().copied().zip(d.into_iter().map(Some)).collect()
            }
            Op::Deform { geom, inputs } => {
                let [x, off, mask, w, b] = *inputs;
                let r = deform::backward(
                    geom,
                    self.value(x).data(),
                    self.value(off).data(),
                    self.value(mask).data(),
                    self.value(w).data(),
                    g,
                    inputs.map(|v| self.want(v)),
                );
                vec![(x, r.dx), (off, r.doff), (mask, r.dmask), (w, r.dw), (b, r.db)]
            }
            Op::EuLoss { form, batch, ch, npix, s, g: target, lv } => {
                let (ds, dg, dlv) = loss::eu_backward(
                    *form,
                    *batch,
                    *ch,
                    *npix,
                    self.value(*s).data(),
                    self.value(*target).data(),
                    self.value(*lv).data(),
                    g[0],
                );
                vec![(*s, Some(ds)), (*target, Some(dg)), (*lv, Some(dlv))]
            }
            Op::Custom { inputs, adjoint } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                inputs.iter().copied().zip(adjoint.backward(&ins, &node.value, g)).collect()
            }
        }
    }
}
