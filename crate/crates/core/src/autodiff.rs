//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its output value and enough context to run its backward rule;
//! [`Tape::backward`] then walks the nodes in reverse insertion order, which is
//! a valid reverse topological order because inputs always precede outputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Normalization domain for pairwise attention scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairNorm {
    /// One softmax over every ordered pair `(r, r')` with `r != r'`.
    Global,
    /// One softmax over all `N*N` pairs including `(r, r)`; diagonal weights
    /// are then dropped, so the kept weights sum to less than one.
    GlobalWithDiagonal,
    /// Independent softmax per row over `r' != r`.
    PerRow,
}

/// One bilinear sample: four spatial source indices and the two lerp weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub idx: [usize; 4],
    pub wx: f64,
    pub wy: f64,
}

impl BilinearTap {
    /// Builds the tap for continuous index coordinates `(u, v)` measured in
    /// pixel-center units (center of pixel `i` sits at `i`), clamped to the map.
    pub fn at(u: f64, v: f64, height: usize, width: usize) -> Self {
        let (x0, x1, wx) = axis_taps(u, width);
        let (y0, y1, wy) = axis_taps(v, height);
        Self {
            idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            wx,
            wy,
        }
    }

    #[inline]
    pub fn sample(&self, x: &[f64], channels: usize, c: usize) -> f64 {
        let v = |k: usize| x[self.idx[k] * channels + c];
        let top = lerp(v(0), v(1), self.wx);
        let bottom = lerp(v(2), v(3), self.wx);
        lerp(top, bottom, self.wy)
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (wx, wy) = (self.wx, self.wy);
        [
            (1.0 - wx) * (1.0 - wy),
            wx * (1.0 - wy),
            (1.0 - wx) * wy,
            wx * wy,
        ]
    }
}

// `a + w (b - a)` returns `a` exactly when `a == b`, so constant maps stay constant.
#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + w * (b - a)
}

fn axis_taps(u: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let u = u.clamp(0.0, max);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - i0 as f64)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Unary { x: Var, kind: Unary },
    Binary { a: Var, b: Var, kind: Binary },
    Scale { x: Var, factor: f64 },
    Softmax { x: Var },
    GlobalAvgPool { x: Var },
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Resample { x: Var, taps: Vec<BilinearTap> },
    ChannelScale { x: Var, gate: Var, skip: bool },
    PairwiseAdd { u: Var, v: Var },
    PairSoftmax { scores: Var, norm: PairNorm, diag: Vec<f64> },
    Stack { parts: Vec<Var> },
    Reshape { x: Var },
    Sum { x: Var },
    Nll { probs: Var, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; all zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => {
                let n = shape.iter().product();
                Tensor::from_parts(shape, vec![0.0; n])
            }
        }
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const LOG_FLOOR: f64 = 1e-12;

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

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf, tracking gradients when the tensor's `requires_grad` is set.
    pub fn input(&mut self, value: Tensor) -> Var {
        let flag = value.requires_grad();
        self.leaf(value, flag)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::MatMul { a, b } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Softmax { x }
            | Op::GlobalAvgPool { x }
            | Op::MaxPool { x, .. }
            | Op::Resample { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => vec![*x],
            Op::ChannelScale { x, gate, .. } => vec![*x, *gate],
            Op::PairwiseAdd { u, v } => vec![*u, *v],
            Op::PairSoftmax { scores, .. } => vec![*scores],
            Op::Stack { parts } => parts.clone(),
            Op::Nll { probs, .. } => vec![*probs],
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    fn map_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects an H x W x C map"),
            }),
        }
    }

    /// `x[n×p] · w[p×q] + b[q]`, bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, p) = self.matrix_dims(x, "affine")?;
        let (p2, q) = self.matrix_dims(w, "affine")?;
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.value(b).numel() != q {
            return Err(Error::ShapeMismatch {
                op: "affine bias",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = matmul_raw(self.data(x), self.data(w), n, p, q);
        let bias = self.data(b);
        for row in out.chunks_exact_mut(q) {
            for (o, bj) in row.iter_mut().zip(bias) {
                *o += bj;
            }
        }
        self.push("affine", vec![n, q], out, Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.matrix_dims(a, "matmul")?;
        let (p2, q) = self.matrix_dims(b, "matmul")?;
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), n, p, q);
        self.push("matmul", vec![n, q], out, Op::MatMul { a, b })
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
        };
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        self.push("unary", self.shape(x).to_vec(), out, Op::Unary { x, kind })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let out = match kind {
            Binary::Add => da.iter().zip(db).map(|(x, y)| x + y).collect(),
            Binary::Mul => da.iter().zip(db).map(|(x, y)| x * y).collect(),
        };
        self.push("elementwise", self.shape(a).to_vec(), out, Op::Binary { a, b, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale { x, factor })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = *shape.last().expect("tensor shapes are non-empty");
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks_exact(m) {
            out.extend(softmax_raw(row));
        }
        self.push("softmax", shape, out, Op::Softmax { x })
    }

    /// Channel means of an `H×W×C` map.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.map_dims(x, "global_average_pool")?;
        let mut out = vec![0.0; c];
        for px in self.data(x).chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let inv = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push("global_average_pool", vec![c], out, Op::GlobalAvgPool { x })
    }

    /// Cross-correlation of an `H×W×Cin` map with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (h, w, cin) = self.map_dims(x, "conv2d")?;
        let (kh, kw, kcin, cout) = match self.shape(k) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "conv2d kernel must be kh x kw x Cin x Cout".into(),
                })
            }
        };
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if kh != kw {
            return Err(Error::invalid("conv2d kernels must be square"));
        }
        if self.value(b).numel() != cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.shape(k).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let pad = match padding {
            Padding::Same => (kh - 1) / 2,
            Padding::Valid => 0,
        };
        let geo = ConvGeometry::new(h, w, cin, kh, cout, stride, pad)?;
        let out = conv_forward(&geo, self.data(x), self.data(k), self.data(b));
        self.push(
            "conv2d",
            vec![geo.oh, geo.ow, cout],
            out,
            Op::Conv2d { x, k, b, stride, pad },
        )
    }

    /// Non-overlapping max pooling with a square window equal to the stride.
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (h, w, c) = self.map_dims(x, "maxpool2d")?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::InvalidShape {
                shape: vec![h, w, c],
                reason: format!("spatial extents must be divisible by pool size {size}"),
            });
        }
        let (oh, ow) = (h / size, w / size);
        let src = self.data(x);
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    // Row-major scan with strict `>` keeps the first maximum.
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = ((oy * size + dy) * w + ox * size + dx) * c + ch;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        self.push("maxpool2d", vec![oh, ow, c], out, Op::MaxPool { x, argmax })
    }

    /// Bilinear upsampling by an integer factor with half-pixel centers
    /// (align-corners false).
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, _) = self.map_dims(x, "bilinear_upsample")?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be at least 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let f = factor as f64;
        let mut taps = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let v = (oy as f64 + 0.5) / f - 0.5;
            for ox in 0..ow {
                let u = (ox as f64 + 0.5) / f - 0.5;
                taps.push(BilinearTap::at(u, v, h, w));
            }
        }
        self.resample(x, taps, oh, ow)
    }

    /// Spatial bilinear gather: output position `i` samples the input at `taps[i]`.
    pub fn resample(&mut self, x: Var, taps: Vec<BilinearTap>, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, c) = self.map_dims(x, "resample")?;
        if taps.len() != out_h * out_w {
            return Err(Error::invalid(format!(
                "resample expects {} taps, got {}",
                out_h * out_w,
                taps.len()
            )));
        }
        if taps.iter().any(|t| t.idx.iter().any(|&i| i >= h * w)) {
            return Err(Error::invalid("resample tap outside the input map"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(taps.len() * c);
        for tap in &taps {
            for ch in 0..c {
                out.push(tap.sample(src, c, ch));
            }
        }
        self.push("resample", vec![out_h, out_w, c], out, Op::Resample { x, taps })
    }

    /// Multiplies channel `c` of `x` (last axis) by `gate[c]`, plus `x` itself
    /// when `skip` is set.
    pub fn channel_scale(&mut self, x: Var, gate: Var, skip: bool) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.value(gate).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gate).to_vec(),
            });
        }
        let g = self.data(gate);
        let mut out = Vec::with_capacity(self.value(x).numel());
        for px in self.data(x).chunks_exact(c) {
            for (v, s) in px.iter().zip(g) {
                out.push(if skip { v * s + v } else { v * s });
            }
        }
        self.push(
            "channel_scale",
            self.shape(x).to_vec(),
            out,
            Op::ChannelScale { x, gate, skip },
        )
    }

    /// All ordered pair sums: row `r * N + r'` of the result is `u[r] + v[r']`.
    pub fn pairwise_add(&mut self, u: Var, v: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(u, "pairwise_add")?;
        if self.shape(v) != [n, d] {
            return Err(Error::ShapeMismatch {
                op: "pairwise_add",
                lhs: self.shape(u).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let (du, dv) = (self.data(u), self.data(v));
        let mut out = Vec::with_capacity(n * n * d);
        for r in 0..n {
            let ur = &du[r * d..(r + 1) * d];
            for r2 in 0..n {
                let vr = &dv[r2 * d..(r2 + 1) * d];
                out.extend(ur.iter().zip(vr).map(|(a, b)| a + b));
            }
        }
        self.push("pairwise_add", vec![n * n, d], out, Op::PairwiseAdd { u, v })
    }

    /// Turns `N*N` pair scores (row-major over `(r, r')`) into an `N×N` weight
    /// matrix with a zero diagonal.
    pub fn pair_softmax(&mut self, scores: Var, norm: PairNorm) -> Result<Var> {
        let total = self.value(scores).numel();
        let n = (total as f64).sqrt().round() as usize;
        if n * n != total || n < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(scores).to_vec(),
                reason: "pair scores must hold N*N values with N >= 2".into(),
            });
        }
        let (out, diag) = pair_softmax_raw(self.data(scores), n, norm);
        self.push("pair_softmax", vec![n, n], out, Op::PairSoftmax { scores, norm, diag })
    }

    /// Stacks equally sized tensors as the rows of a matrix.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("stack needs at least one tensor"))?;
        let d = self.value(first).numel();
        let mut out = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            if self.value(p).numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.data(p));
        }
        self.push(
            "stack",
            vec![parts.len(), d],
            out,
            Op::Stack {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("reshape", shape, data, Op::Reshape { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x })
    }

    /// Mean negative log-likelihood of `labels` under row-wise probabilities
    /// `probs[M×G]`; the log argument is floored at 1e-12.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (m, g) = self.matrix_dims(probs, "batch_loss")?;
        if labels.len() != m || m == 0 {
            return Err(Error::invalid(format!(
                "batch_loss: {} labels for {m} probability rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= g) {
            return Err(Error::invalid(format!("label {bad} out of range for {g} classes")));
        }
        let p = self.data(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| p[i * g + y].max(LOG_FLOOR).ln())
            .sum();
        let loss = -total / m as f64;
        self.push(
            "batch_loss",
            vec![1],
            vec![loss],
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                reason: "backward requires a scalar loss".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(i, &g, &mut grads);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn apply_rule(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, p) = (self.shape(*x)[0], self.shape(*x)[1]);
                let q = self.shape(*w)[1];
                self.matmul_backward(*x, *w, g, n, p, q, grads);
                if self.wants(*b) {
                    let db = slot(grads, *b, q);
                    for row in g.chunks_exact(q) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (n, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let q = self.shape(*b)[1];
                self.matmul_backward(*a, *b, g, n, p, q, grads);
            }
            Op::Unary { x, kind } => {
                if self.wants(*x) {
                    let xin = self.data(*x);
                    let dx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        let y = out[j];
                        dx[j] += g[j]
                            * match kind {
                                Unary::Tanh => 1.0 - y * y,
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Relu => {
                                    if xin[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let (a, b) = (*a, *b);
                match kind {
                    Binary::Add => {
                        for v in [a, b] {
                            if self.wants(v) {
                                add_into(slot(grads, v, g.len()), g);
                            }
                        }
                    }
                    Binary::Mul => {
                        if self.wants(a) {
                            let other = self.data(b);
                            let da = slot(grads, a, g.len());
                            for j in 0..g.len() {
                                da[j] += g[j] * other[j];
                            }
                        }
                        if self.wants(b) {
                            let other = self.data(a);
                            let db = slot(grads, b, g.len());
                            for j in 0..g.len() {
                                db[j] += g[j] * other[j];
                            }
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * factor;
                    }
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let m = *self.shape(*x).last().unwrap();
                    let dx = slot(grads, *x, g.len());
                    for ((dr, gr), yr) in dx.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(out.chunks_exact(m)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    let c = g.len();
                    let inv = 1.0 / (n / c) as f64;
                    let dx = slot(grads, *x, n);
                    for px in dx.chunks_exact_mut(c) {
                        for (d, gv) in px.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, stride, pad } => {
                let (h, w, cin) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (kh, cout) = (self.shape(*k)[0], self.shape(*k)[3]);
                let geo = ConvGeometry::new(h, w, cin, kh, cout, *stride, *pad).expect("validated in forward");
                let dx = if self.wants(*x) {
                    Some(take_slot(grads, *x, h * w * cin))
                } else {
                    None
                };
                let dk = if self.wants(*k) {
                    Some(take_slot(grads, *k, self.value(*k).numel()))
                } else {
                    None
                };
                let (dx, dk) = conv_backward(&geo, self.data(*x), self.data(*k), g, dx, dk);
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dk) = dk {
                    grads[k.0] = Some(dk);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, cout);
                    for row in g.chunks_exact(cout) {
                        add_into(db, row);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let dx = slot(grads, *x, self.value(*x).numel());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::Resample { x, taps } => {
                if self.wants(*x) {
                    let c = *self.shape(*x).last().unwrap();
                    let dx = slot(grads, *x, self.value(*x).numel());
                    for (tap, go) in taps.iter().zip(g.chunks_exact(c)) {
                        for (idx, wt) in tap.idx.iter().zip(tap.weights()) {
                            if wt == 0.0 {
                                continue;
                            }
                            let row = &mut dx[idx * c..(idx + 1) * c];
                            for (d, gv) in row.iter_mut().zip(go) {
                                *d += wt * gv;
                            }
                        }
                    }
                }
            }
            Op::ChannelScale { x, gate, skip } => {
                let c = self.value(*gate).numel();
                if self.wants(*x) {
                    let s = self.data(*gate);
                    let dx = slot(grads, *x, g.len());
                    for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            let gain = if *skip { s[j] + 1.0 } else { s[j] };
                            dr[j] += gr[j] * gain;
                        }
                    }
                }
                if self.wants(*gate) {
                    let xin = self.data(*x);
                    let ds = slot(grads, *gate, c);
                    for (xr, gr) in xin.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            ds[j] += gr[j] * xr[j];
                        }
                    }
                }
            }
            Op::PairwiseAdd { u, v } => {
                let (n, d) = (self.shape(*u)[0], self.shape(*u)[1]);
                if self.wants(*u) {
                    let du = slot(grads, *u, n * d);
                    for r in 0..n {
                        let dst = &mut du[r * d..(r + 1) * d];
                        for r2 in 0..n {
                            add_into(dst, &g[(r * n + r2) * d..(r * n + r2 + 1) * d]);
                        }
                    }
                }
                if self.wants(*v) {
                    let dv = slot(grads, *v, n * d);
                    for r in 0..n {
                        for r2 in 0..n {
                            add_into(&mut dv[r2 * d..(r2 + 1) * d], &g[(r * n + r2) * d..(r * n + r2 + 1) * d]);
                        }
                    }
                }
            }
            Op::PairSoftmax { scores, norm, diag } => {
                if self.wants(*scores) {
                    let n = diag.len();
                    let ds = slot(grads, *scores, n * n);
                    pair_softmax_backward(out, diag, g, n, *norm, ds);
                }
            }
            Op::Stack { parts } => {
                let d = out.len() / parts.len();
                for (r, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        add_into(slot(grads, p, d), &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let dx = slot(grads, *x, self.value(*x).numel());
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Nll { probs, labels } => {
                if self.wants(*probs) {
                    let gcount = self.shape(*probs)[1];
                    let m = labels.len() as f64;
                    let p = self.data(*probs);
                    let dp = slot(grads, *probs, p.len());
                    for (row, &y) in labels.iter().enumerate() {
                        let idx = row * gcount + y;
                        if p[idx] > LOG_FLOOR {
                            dp[idx] -= g[0] / (m * p[idx]);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        g: &[f64],
        n: usize,
        p: usize,
        q: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if self.wants(a) {
            let bd = self.data(b);
            let da = slot(grads, a, n * p);
            for i in 0..n {
                let gi = &g[i * q..(i + 1) * q];
                for k in 0..p {
                    let brow = &bd[k * q..(k + 1) * q];
                    da[i * p + k] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        if self.wants(b) {
            let ad = self.data(a);
            let db = slot(grads, b, p * q);
            for i in 0..n {
                let gi = &g[i * q..(i + 1) * q];
                for k in 0..p {
                    let av = ad[i * p + k];
                    if av == 0.0 {
                        continue;
                    }
                    for (d, gv) in db[k * q..(k + 1) * q].iter_mut().zip(gi) {
                        *d += av * gv;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn take_slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> Vec<f64> {
    grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_raw(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * q];
    for i in 0..n {
        let orow = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let av = a[i * p + k];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[k * q..(k + 1) * q]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn in_domain(norm: PairNorm, r: usize, r2: usize) -> bool {
    norm == PairNorm::GlobalWithDiagonal || r != r2
}

/// Returns the `N×N` weights (zero diagonal) and, for the diagonal-inclusive
/// normalization, the probability mass each dropped diagonal entry received.
fn pair_softmax_raw(s: &[f64], n: usize, norm: PairNorm) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * n];
    let mut diag = vec![0.0; n];
    let mut normalize = |rows: std::ops::Range<usize>| {
        let mut max = f64::NEG_INFINITY;
        for r in rows.clone() {
            for r2 in 0..n {
                if in_domain(norm, r, r2) {
                    max = max.max(s[r * n + r2]);
                }
            }
        }
        let mut z = 0.0;
        for r in rows.clone() {
            for r2 in 0..n {
                if in_domain(norm, r, r2) {
                    let e = (s[r * n + r2] - max).exp();
                    z += e;
                    if r == r2 {
                        diag[r] = e;
                    } else {
                        out[r * n + r2] = e;
                    }
                }
            }
        }
        for r in rows {
            diag[r] /= z;
            for r2 in 0..n {
                out[r * n + r2] /= z;
            }
        }
    };
    match norm {
        PairNorm::Global | PairNorm::GlobalWithDiagonal => normalize(0..n),
        PairNorm::PerRow => (0..n).for_each(|r| normalize(r..r + 1)),
    }
    (out, diag)
}

// Within one normalization group with probabilities y, ds_i = y_i (g_i - Σ g_j y_j).
// Diagonal outputs are constant zero, so their incoming gradient is zero, but
// under the diagonal-inclusive rule their scores still receive -y_rr Σ g_j y_j.
fn pair_softmax_backward(out: &[f64], diag: &[f64], g: &[f64], n: usize, norm: PairNorm, ds: &mut [f64]) {
    let group = |ds: &mut [f64], rows: std::ops::Range<usize>| {
        let mut dot = 0.0;
        for r in rows.clone() {
            for r2 in 0..n {
                if r != r2 {
                    dot += g[r * n + r2] * out[r * n + r2];
                }
            }
        }
        for r in rows {
            for r2 in 0..n {
                let idx = r * n + r2;
                if r != r2 {
                    ds[idx] += out[idx] * (g[idx] - dot);
                } else if norm == PairNorm::GlobalWithDiagonal {
                    ds[idx] -= diag[r] * dot;
                }
            }
        }
    };
    match norm {
        PairNorm::Global | PairNorm::GlobalWithDiagonal => group(ds, 0..n),
        PairNorm::PerRow => (0..n).for_each(|r| group(ds, r..r + 1)),
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(h: usize, w: usize, cin: usize, k: usize, cout: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::InvalidShape {
                shape: vec![h, w, cin],
                reason: format!("input smaller than {k}x{k} kernel"),
            });
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad,
            oh,
            ow,
        })
    }

    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn conv_forward(geo: &ConvGeometry, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let ConvGeometry { w, cin, cout, oh, ow, .. } = *geo;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            o.copy_from_slice(b);
            for ky in 0..geo.k {
                let Some(iy) = geo.source(oy, ky, geo.h) else { continue };
                for kx in 0..geo.k {
                    let Some(ix) = geo.source(ox, kx, w) else { continue };
                    let xin = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * geo.k + kx) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (ov, kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    geo: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    g: &[f64],
    mut dx: Option<Vec<f64>>,
    mut dk: Option<Vec<f64>>,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ConvGeometry { w, cin, cout, oh, ow, .. } = *geo;
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..geo.k {
                let Some(iy) = geo.source(oy, ky, geo.h) else { continue };
                for kx in 0..geo.k {
                    let Some(ix) = geo.source(ox, kx, w) else { continue };
                    let xoff = (iy * w + ix) * cin;
                    let kbase = (ky * geo.k + kx) * cin * cout;
                    for ci in 0..cin {
                        let kr = kbase + ci * cout..kbase + (ci + 1) * cout;
                        if let Some(dx) = dx.as_mut() {
                            dx[xoff + ci] += go.iter().zip(&k[kr.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(dk) = dk.as_mut() {
                            let xv = x[xoff + ci];
                            if xv != 0.0 {
                                for (d, gv) in dk[kr].iter_mut().zip(go) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
