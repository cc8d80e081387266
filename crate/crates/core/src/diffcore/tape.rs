//! Reverse-mode tape.
//!
//! Every primitive records its output value and whatever it needs for the
//! backward pass. Nodes are appended in evaluation order, so the node list is
//! already topologically sorted and `grad` is a single reverse sweep.

use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::detector::BBox;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Vec<f64>),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Reshape(Var),
    Abs(Var),
    Square(Var),
    Norm(Var),
    Sigmoid(Var),
    Squash(Var),
    SmoothLeaky(Var, f64),
    Sum(Var),
    Mean(Var),
    ChannelMul(Var, Var),
    ChannelAdd(Var, Var),
    Resize { x: Var, c: usize, h: usize, w: usize },
    BoxDown { x: Var, f: usize },
    Crop { x: Var, bbox: BBox },
    Gather { x: Var, idx: Vec<usize> },
    Narrow { x: Var, start: usize },
    Concat(Vec<Var>),
    Conv3x3 { x: Var, wt: Var },
    ChannelRmsNorm { x: Var, eps: f64 },
    Blob { params: Var, aspect: f64, kappa: f64 },
    StyleLayer(Box<StyleLayerOp>),
}

#[derive(Debug, Clone)]
struct StyleLayerOp {
    x: Var,
    s: Var,
    t: Var,
    mix: Arc<Tensor>,
    slope: f64,
    eps: f64,
    /// Pre-activation values.
    pre: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn image_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        self.value(x)
            .chw()
            .map_err(|_| Error::shape(op, format!("expected [c,h,w], got {:?}", self.shape(x))))
    }

    // --- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Offset(a), &[a])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.shape(a), c.shape()),
            ));
        }
        let v = self.value(a).zip_map(c, |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, c.data().to_vec()), &[a]))
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Algebraic sigmoid `½ + ½·x/√(1 + x²)`; crosses ½ at 0 like the logistic.
    pub fn squash(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::squash);
        self.push(v, Op::Squash(a), &[a])
    }

    /// Leaky ReLU with a smooth hyperbolic knee of width [`kernels::KNEE`].
    pub fn smooth_leaky(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| kernels::smooth_leaky(x, slope));
        self.push(v, Op::SmoothLeaky(a, slope), &[a])
    }

    // --- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    /// Euclidean norm over all elements; subgradient 0 at the origin.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).norm());
        self.push(v, Op::Norm(a), &[a])
    }

    // --- linear algebra and layout ----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("expected 2-D operands, got {sa:?} · {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m}×{k}] · [{k2}×{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(v, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Slice `[start, start + len)` along the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) of leading axis in {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let v = Tensor::from_parts(out_shape, data);
        Ok(self.push(v, Op::Narrow { x: a, start }, &[a]))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing dims {:?} vs {tail:?}", s.get(1..)),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Flat gather; output has `shape` and element `j` is `x.flat[idx[j]]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather", "index count does not match shape"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n}")));
        }
        let src = self.value(a).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let v = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(v, Op::Gather { x: a, idx }, &[a]))
    }

    // --- image ops ---------------------------------------------------------

    /// `x[c,h,w] · s[c]`, broadcasting the per-channel factor.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.image_dims("channel_mul", x)?;
        if self.value(s).len() != c {
            return Err(Error::shape(
                "channel_mul",
                format!("{c} channels but {} factors", self.value(s).len()),
            ));
        }
        let plane = h * w;
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for ch in 0..c {
            data[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v *= sv[ch]);
        }
        let v = Tensor::from_parts(vec![c, h, w], data);
        Ok(self.push(v, Op::ChannelMul(x, s), &[x, s]))
    }

    /// `x[c,h,w] + b[c]`, broadcasting the per-channel shift.
    pub fn channel_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.image_dims("channel_add", x)?;
        if self.value(b).len() != c {
            return Err(Error::shape(
                "channel_add",
                format!("{c} channels but {} shifts", self.value(b).len()),
            ));
        }
        let plane = h * w;
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for ch in 0..c {
            data[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bv[ch]);
        }
        let v = Tensor::from_parts(vec![c, h, w], data);
        Ok(self.push(v, Op::ChannelAdd(x, b), &[x, b]))
    }

    /// Align-corners-false bilinear resize to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.image_dims("resize_bilinear", x)?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "empty spatial extent"));
        }
        let data = kernels::resize_forward(self.value(x).data(), c, h, w, out_h, out_w);
        let v = Tensor::from_parts(vec![c, out_h, out_w], data);
        Ok(self.push(v, Op::Resize { x, c, h, w }, &[x]))
    }

    pub fn upsample_bilinear_2x(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.image_dims("upsample_bilinear_2x", x)?;
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    /// Non-overlapping `f×f` box average.
    pub fn box_downsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let (c, h, w) = self.image_dims("box_downsample", x)?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(
                "box_downsample",
                format!("{h}×{w} is not divisible by factor {f}"),
            ));
        }
        let data = kernels::box_down_forward(self.value(x).data(), c, h, w, f);
        let v = Tensor::from_parts(vec![c, h / f, w / f], data);
        Ok(self.push(v, Op::BoxDown { x, f }, &[x]))
    }

    /// Box-average to `target × target`; both sides must be multiples of `target`
    /// with the same factor.
    pub fn downsample_avg(&mut self, x: Var, target: usize) -> Result<Var> {
        let (_, h, w) = self.image_dims("downsample_avg", x)?;
        if target == 0 || h % target != 0 || w % target != 0 || h / target != w / target {
            return Err(Error::shape(
                "downsample_avg",
                format!("{h}×{w} cannot be box-averaged to {target}×{target}"),
            ));
        }
        self.box_downsample(x, h / target)
    }

    pub fn crop(&mut self, x: Var, bbox: BBox) -> Result<Var> {
        let (c, h, w) = self.image_dims("crop", x)?;
        if !bbox.fits(h, w) {
            return Err(Error::OutOfBounds {
                bbox,
                height: h,
                width: w,
            });
        }
        let v = crop_value(self.value(x), c, h, w, bbox);
        Ok(self.push(v, Op::Crop { x, bbox }, &[x]))
    }

    /// Keep channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.image_dims("slice_channels", x)?;
        self.narrow(x, start, len)
    }

    /// Zero-padded 3×3 convolution; `wt` is `[cout, cin, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, wt: Var) -> Result<Var> {
        let (cin, h, w) = self.image_dims("conv3x3", x)?;
        let cout = match self.shape(wt) {
            &[o, i, 3, 3] if i == cin => o,
            s => {
                return Err(Error::shape(
                    "conv3x3",
                    format!("weight {s:?} for {cin} input channels"),
                ))
            }
        };
        let data =
            kernels::conv3x3_forward(self.value(x).data(), self.value(wt).data(), cin, cout, h, w);
        let v = Tensor::from_parts(vec![cout, h, w], data);
        Ok(self.push(v, Op::Conv3x3 { x, wt }, &[x, wt]))
    }

    /// Per-pixel normalization across channels: `x / sqrt(mean_c x² + eps)`.
    pub fn channel_rms_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.image_dims("channel_rms_norm", x)?;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * plane];
        for p in 0..plane {
            let ms = (0..c).map(|ch| xv[ch * plane + p].powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ch in 0..c {
                out[ch * plane + p] = xv[ch * plane + p] * inv;
            }
        }
        let v = Tensor::from_parts(vec![c, h, w], out);
        Ok(self.push(v, Op::ChannelRmsNorm { x, eps }, &[x]))
    }

    /// Soft elliptical blob on an `h×w` grid.
    ///
    /// `params = [center_row, center_col, radius]` in pixels. Pixel `(r, c)`
    /// sits at `(r + 0.5, c + 0.5)`; the value is
    /// `σ(κ·(1 − q))` with `q = (dr² + (dc/aspect)²) / radius²`, so it
    /// crosses 0.5 exactly on the ellipse boundary.
    pub fn blob(&mut self, params: Var, h: usize, w: usize, aspect: f64, kappa: f64) -> Result<Var> {
        if self.value(params).len() != 3 {
            return Err(Error::shape("blob", "expected [row, col, radius]"));
        }
        let p = self.value(params).data();
        let (cr, cc, rad) = (p[0], p[1], p[2]);
        let inv_r2 = 1.0 / (rad * rad);
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            let dr = r as f64 + 0.5 - cr;
            for c in 0..w {
                let dc = (c as f64 + 0.5 - cc) / aspect;
                let q = (dr * dr + dc * dc) * inv_r2;
                out[r * w + c] = kernels::sigmoid(kappa * (1.0 - q));
            }
        }
        let v = Tensor::from_parts(vec![1, h, w], out);
        Ok(self.push(v, Op::Blob { params, aspect, kappa }, &[params]))
    }

    /// Fused modulated layer:
    /// `rms_norm(smooth_leaky(mix · (x ⊙ s) + field + t, slope), eps)`.
    ///
    /// `x` is `[cin, h, w]`, `s` has `cin` entries, `t` has `cout`, `mix` is
    /// `[cout, cin]` and `field` is `[cout, h, w]`. `mix` and `field` are
    /// constants.
    #[allow(clippy::too_many_arguments)]
    pub fn style_layer(
        &mut self,
        x: Var,
        s: Var,
        t: Var,
        mix: &Arc<Tensor>,
        field: &Tensor,
        slope: f64,
        eps: f64,
    ) -> Result<Var> {
        let (cin, h, w) = self.image_dims("style_layer", x)?;
        let cout = match mix.shape() {
            &[o, i] if i == cin => o,
            sh => {
                return Err(Error::shape(
                    "style_layer",
                    format!("mix {sh:?} for {cin} input channels"),
                ))
            }
        };
        if self.value(s).len() != cin || self.value(t).len() != cout {
            return Err(Error::shape(
                "style_layer",
                format!(
                    "{} scales and {} shifts for {cin}→{cout} channels",
                    self.value(s).len(),
                    self.value(t).len()
                ),
            ));
        }
        if field.shape() != [cout, h, w] {
            return Err(Error::shape(
                "style_layer",
                format!("field {:?}, expected {:?}", field.shape(), [cout, h, w]),
            ));
        }
        let plane = h * w;
        let (xv, sv, tv, mv) = (
            self.value(x).data(),
            self.value(s).data(),
            self.value(t).data(),
            mix.data(),
        );
        let mut pre = field.data().to_vec();
        for o in 0..cout {
            let dst = &mut pre[o * plane..(o + 1) * plane];
            dst.iter_mut().for_each(|v| *v += tv[o]);
            for i in 0..cin {
                let k = mv[o * cin + i] * sv[i];
                for (d, xi) in dst.iter_mut().zip(&xv[i * plane..(i + 1) * plane]) {
                    *d += k * xi;
                }
            }
        }
        let mut out: Vec<f64> = pre.iter().map(|&v| kernels::smooth_leaky(v, slope)).collect();
        let mut ms = vec![0.0; plane];
        for o in 0..cout {
            for (m, a) in ms.iter_mut().zip(&out[o * plane..(o + 1) * plane]) {
                *m += a * a;
            }
        }
        let inv: Vec<f64> = ms
            .iter()
            .map(|m| 1.0 / (m / cout as f64 + eps).sqrt())
            .collect();
        for o in 0..cout {
            for (a, r) in out[o * plane..(o + 1) * plane].iter_mut().zip(&inv) {
                *a *= r;
            }
        }
        let v = Tensor::from_parts(vec![cout, h, w], out);
        let op = StyleLayerOp {
            x,
            s,
            t,
            mix: Arc::clone(mix),
            slope,
            eps,
            pre,
        };
        Ok(self.push(v, Op::StyleLayer(Box::new(op)), &[x, s, t]))
    }

    // --- backward ------------------------------------------------------------

    /// Gradients of scalar `loss` with respect to each of `leaves`.
    ///
    /// Leaves the loss does not depend on receive zeros.
    pub fn grad(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        Ok(leaves
            .iter()
            .map(|&v| {
                let shape = self.shape(v).to_vec();
                match grads.get_mut(v.0).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, k) => self.acc(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += k * v)
            }),
            Op::Offset(a) | Op::Reshape(a) => self.acc(grads, *a, |ga| add_into(ga, g)),
            Op::MulConst(a, c) => self.acc(grads, *a, |ga| {
                for ((o, gv), cv) in ga.iter_mut().zip(g).zip(c) {
                    *o += gv * cv;
                }
            }),
            Op::Matmul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| kernels::matmul_bt_acc(g, bv, ga, *m, *k, *n));
                self.acc(grads, *b, |gb| kernels::matmul_at_acc(av, g, gb, *m, *k, *n));
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *o += gv;
                        } else if *x < 0.0 {
                            *o -= gv;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(av) {
                        *o += 2.0 * x * gv;
                    }
                });
            }
            Op::Norm(a) => {
                let av = self.value(*a).data();
                let nrm = y[0];
                if nrm > 0.0 {
                    let s = g[0] / nrm;
                    self.acc(grads, *a, |ga| {
                        ga.iter_mut().zip(av).for_each(|(o, x)| *o += s * x)
                    });
                }
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for ((o, gv), s) in ga.iter_mut().zip(g).zip(y) {
                    *o += gv * s * (1.0 - s);
                }
            }),
            Op::Squash(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gv * kernels::squash_grad(*x);
                    }
                });
            }
            Op::SmoothLeaky(a, slope) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gv * kernels::smooth_leaky_grad(*x, *slope);
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::ChannelMul(x, s) => {
                let (c, h, w) = node.value.chw().expect("image");
                let plane = h * w;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                self.acc(grads, *x, |gx| {
                    for (ch, s) in sv.iter().enumerate().take(c) {
                        let r = ch * plane..(ch + 1) * plane;
                        for (o, gv) in gx[r.clone()].iter_mut().zip(&g[r]) {
                            *o += gv * s;
                        }
                    }
                });
                self.acc(grads, *s, |gs| {
                    for (ch, o) in gs.iter_mut().enumerate().take(c) {
                        let r = ch * plane..(ch + 1) * plane;
                        *o += g[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::ChannelAdd(x, b) => {
                let (c, h, w) = node.value.chw().expect("image");
                let plane = h * w;
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *b, |gb| {
                    for ch in 0..c {
                        gb[ch] += g[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                    }
                });
            }
            Op::Resize { x, c, h, w } => {
                let (_, oh, ow) = node.value.chw().expect("image");
                self.acc(grads, *x, |gx| kernels::resize_backward(g, gx, *c, *h, *w, oh, ow));
            }
            Op::BoxDown { x, f } => {
                let (c, h, w) = self.value(*x).chw().expect("image");
                self.acc(grads, *x, |gx| kernels::box_down_backward(g, gx, c, h, w, *f));
            }
            Op::Crop { x, bbox } => {
                let (c, h, w) = self.value(*x).chw().expect("image");
                let b = *bbox;
                self.acc(grads, *x, |gx| {
                    for ch in 0..c {
                        for r in 0..b.height {
                            let src = (ch * b.height + r) * b.width;
                            let dst = (ch * h + b.row + r) * w + b.col;
                            add_into(&mut gx[dst..dst + b.width], &g[src..src + b.width]);
                        }
                    }
                });
            }
            Op::Gather { x, idx } => self.acc(grads, *x, |gx| {
                for (j, &i) in idx.iter().enumerate() {
                    gx[i] += g[j];
                }
            }),
            Op::Narrow { x, start } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                let off = start * inner;
                self.acc(grads, *x, |gx| add_into(&mut gx[off..off + g.len()], g));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Conv3x3 { x, wt } => {
                let (cin, h, w) = self.value(*x).chw().expect("image");
                let cout = node.value.shape()[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*wt).data());
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[wt.0].requires_grad;
                let mut gx_buf = need_x.then(|| vec![0.0; xv.len()]);
                let mut gw_buf = need_w.then(|| vec![0.0; wv.len()]);
                kernels::conv3x3_backward(
                    g,
                    xv,
                    wv,
                    gx_buf.as_deref_mut(),
                    gw_buf.as_deref_mut(),
                    cin,
                    cout,
                    h,
                    w,
                );
                if let Some(b) = gx_buf {
                    self.acc(grads, *x, |gx| add_into(gx, &b));
                }
                if let Some(b) = gw_buf {
                    self.acc(grads, *wt, |gw| add_into(gw, &b));
                }
            }
            Op::ChannelRmsNorm { x, eps } => {
                let (c, h, w) = node.value.chw().expect("image");
                let plane = h * w;
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for p in 0..plane {
                        let ms = (0..c).map(|ch| xv[ch * plane + p].powi(2)).sum::<f64>()
                            / c as f64;
                        let r = (ms + eps).sqrt();
                        let dot: f64 = (0..c).map(|ch| g[ch * plane + p] * xv[ch * plane + p]).sum();
                        let k = dot / (c as f64 * r * r * r);
                        for ch in 0..c {
                            let i = ch * plane + p;
                            gx[i] += g[i] / r - xv[i] * k;
                        }
                    }
                });
            }
            Op::Blob { params, aspect, kappa } => {
                let (_, h, w) = node.value.chw().expect("image");
                let p = self.value(*params).data();
                let (cr, cc, rad) = (p[0], p[1], p[2]);
                let inv_r2 = 1.0 / (rad * rad);
                let (mut d_cr, mut d_cc, mut d_rad) = (0.0, 0.0, 0.0);
                for r in 0..h {
                    let dr = r as f64 + 0.5 - cr;
                    for c in 0..w {
                        let i = r * w + c;
                        let dcs = (c as f64 + 0.5 - cc) / aspect;
                        let q = (dr * dr + dcs * dcs) * inv_r2;
                        // dy/dq
                        let dq = -kappa * y[i] * (1.0 - y[i]) * g[i];
                        d_cr += dq * (-2.0 * dr * inv_r2);
                        d_cc += dq * (-2.0 * dcs / aspect * inv_r2);
                        d_rad += dq * (-2.0 * q / rad);
                    }
                }
                self.acc(grads, *params, |gp| {
                    gp[0] += d_cr;
                    gp[1] += d_cc;
                    gp[2] += d_rad;
                });
            }
            Op::StyleLayer(op) => self.style_layer_backward(node, op, g, grads),
        }
    }

    fn style_layer_backward(
        &self,
        node: &Node,
        op: &StyleLayerOp,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (cout, h, w) = node.value.chw().expect("image");
        let plane = h * w;
        let xv = self.value(op.x).data();
        let sv = self.value(op.s).data();
        let cin = sv.len();
        let mv = op.mix.data();
        let out = node.value.data();
        // out = a / r, so a = out · r and the rms backward needs Σ g·a / r³,
        // which equals Σ g·out / r² per pixel.
        let mut dot = vec![0.0; plane];
        let mut r2 = vec![0.0; plane];
        for o in 0..cout {
            let rng = o * plane..(o + 1) * plane;
            for ((d, gv), ov) in dot.iter_mut().zip(&g[rng.clone()]).zip(&out[rng.clone()]) {
                *d += gv * ov;
            }
            for (r, a) in r2.iter_mut().zip(&op.pre[rng]) {
                let act = kernels::smooth_leaky(*a, op.slope);
                *r += act * act;
            }
        }
        r2.iter_mut().for_each(|r| *r = *r / cout as f64 + op.eps);
        let mut gy = vec![0.0; cout * plane];
        for o in 0..cout {
            for p in 0..plane {
                let i = o * plane + p;
                let r = r2[p].sqrt();
                let ga = (g[i] - out[i] * dot[p] / cout as f64) / r;
                gy[i] = ga * kernels::smooth_leaky_grad(op.pre[i], op.slope);
            }
        }
        self.acc(grads, op.t, |gt| {
            for o in 0..cout {
                gt[o] += gy[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        });
        let need_x = self.nodes[op.x.0].requires_grad;
        let need_s = self.nodes[op.s.0].requires_grad;
        if !need_x && !need_s {
            return;
        }
        // back[i] = Σ_o mix[o,i] · gy[o]
        let mut back = vec![0.0; cin * plane];
        for i in 0..cin {
            let dst = &mut back[i * plane..(i + 1) * plane];
            for o in 0..cout {
                let k = mv[o * cin + i];
                for (d, v) in dst.iter_mut().zip(&gy[o * plane..(o + 1) * plane]) {
                    *d += k * v;
                }
            }
        }
        self.acc(grads, op.s, |gs| {
            for (i, o) in gs.iter_mut().enumerate().take(cin) {
                let rng = i * plane..(i + 1) * plane;
                *o += back[rng.clone()].iter().zip(&xv[rng]).map(|(a, b)| a * b).sum::<f64>();
            }
        });
        self.acc(grads, op.x, |gx| {
            for (i, s) in sv.iter().enumerate().take(cin) {
                let rng = i * plane..(i + 1) * plane;
                for (o, b) in gx[rng.clone()].iter_mut().zip(&back[rng]) {
                    *o += s * b;
                }
            }
        });
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn crop_value(x: &Tensor, c: usize, h: usize, w: usize, b: BBox) -> Tensor {
    let src = x.data();
    let mut data = Vec::with_capacity(c * b.height * b.width);
    for ch in 0..c {
        for r in 0..b.height {
            let s = (ch * h + b.row + r) * w + b.col;
            data.extend_from_slice(&src[s..s + b.width]);
        }
    }
    Tensor::from_parts(vec![c, b.height, b.width], data)
}
