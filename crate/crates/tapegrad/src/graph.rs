use crate::error::{invalid, Error, Result};
use crate::float::Float;
use crate::ops::{self, ConvDims, FilterKernel, Pad, PadMode};
use crate::tensor::{Spatial, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Powf(Var, T),
    Sqr(Var),
    Abs(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Var },
    Filter { x: Var, kernel: FilterKernel<T> },
    PadIndexed { x: Var, pad: Pad, mode: PadMode },
    PadZero { x: Var, pad: Pad },
    Crop { x: Var, y0: usize, x0: usize },
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    MeanChannels(Var),
    Broadcast(Var),
    Spatial(Var, Spatial),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape. Nodes are appended in evaluation order, so the node index is a
/// valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient for a leaf created with [`Graph::param`]. `None` when the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant copy of `x`: same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(invalid("scalar", format!("node has shape {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    /// Elementwise `x^e`. Inputs are expected to be non-negative.
    pub fn powf(&mut self, a: Var, e: T) -> Var {
        self.unary(a, |x| x.powf(e), Op::Powf(a, e))
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Sqr(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Sum of several nodes of identical shape.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| invalid("add_all", "no operands"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Stride-1 convolution with zero padding `k/2` (odd `k`).
    /// `x: [ci,h,w]`, `w: [co,ci,k,k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ci, h, wd) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        let &[co, wci, kh, kw] = ws.as_slice() else {
            return Err(invalid("conv2d", format!("weight shape {ws:?}")));
        };
        if wci != ci || kh != kw || kh % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        if self.shape(b) != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![co],
                rhs: self.shape(b).to_vec(),
            });
        }
        let dims = ConvDims {
            c_in: ci,
            c_out: co,
            h,
            w: wd,
            k: kh,
        };
        let out = ops::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[co, h, wd], out)?, Op::Conv2d { x, w, b }, rg))
    }

    /// Applies a constant kernel to every channel over the valid region.
    pub fn filter(&mut self, x: Var, kernel: FilterKernel<T>) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if kernel.weights.len() != kernel.kh * kernel.kw {
            return Err(invalid("filter", "kernel weight count mismatch"));
        }
        if kernel.output_size(h, w).is_none() {
            return Err(invalid(
                "filter",
                format!("{h}x{w} input smaller than {}x{} kernel", kernel.kh, kernel.kw),
            ));
        }
        let (out, oh, ow) = ops::filter_forward(self.value(x).data(), c, h, w, &kernel);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::Filter { x, kernel }, rg))
    }

    /// Pads by repeating edge pixels.
    pub fn pad_replicate(&mut self, x: Var, pad: Pad) -> Result<Var> {
        self.pad_indexed(x, pad, PadMode::Replicate)
    }

    /// Pads by mirroring about the edge pixels (edge not repeated).
    pub fn pad_reflect(&mut self, x: Var, pad: Pad) -> Result<Var> {
        self.pad_indexed(x, pad, PadMode::Reflect)
    }

    fn pad_indexed(&mut self, x: Var, pad: Pad, mode: PadMode) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h == 0 || w == 0 {
            return Err(invalid("pad", "empty input"));
        }
        if mode == PadMode::Reflect && (pad.top.max(pad.bottom) >= h || pad.left.max(pad.right) >= w) {
            return Err(invalid("pad_reflect", format!("pad {pad:?} too large for {h}x{w}")));
        }
        let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let sy = mode.source(y as isize - pad.top as isize, h);
                for xx in 0..ow {
                    let sx = mode.source(xx as isize - pad.left as isize, w);
                    out.push(src[ch * h * w + sy * w + sx]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::PadIndexed { x, pad, mode }, rg))
    }

    pub fn pad_zero(&mut self, x: Var, pad: Pad) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                let d = ch * oh * ow + (y + pad.top) * ow + pad.left;
                out[d..d + w].copy_from_slice(&src[ch * h * w + y * w..ch * h * w + (y + 1) * w]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::PadZero { x, pad }, rg))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of every channel.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let (c, ih, iw) = self.value(x).chw()?;
        if y0 + h > ih || x0 + w > iw {
            return Err(invalid(
                "crop",
                format!("window {h}x{w}@({y0},{x0}) exceeds {ih}x{iw}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let s = ch * ih * iw + (y0 + y) * iw + x0;
                out.extend_from_slice(&src[s..s + w]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::Crop { x, y0, x0 }, rg))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat", "no operands"))?;
        let (_, h, w) = self.value(first).chw()?;
        let mut c_total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            c_total += c;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[c_total, h, w], out)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Channels `[start, start+len)`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if start + len > c {
            return Err(invalid("narrow", format!("{start}+{len} > {c} channels")));
        }
        let data = self.value(x).data()[start * h * w..(start + len) * h * w].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[len, h, w], data)?, Op::Narrow { x, start }, rg))
    }

    /// Mean over channels, keeping a single channel.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(c).unwrap();
        let out = (0..h * w)
            .map(|p| (0..c).map(|ch| src[ch * h * w + p]).sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[1, h, w], out)?, Op::MeanChannels(x), rg))
    }

    /// Repeats a single-channel tensor `c` times along the channel axis.
    pub fn broadcast_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let (c1, h, w) = self.value(x).chw()?;
        if c1 != 1 {
            return Err(invalid("broadcast_channels", format!("{c1} channels")));
        }
        let src = self.value(x).data();
        let out: Vec<T> = (0..c).flat_map(|_| src.iter().copied()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::Broadcast(x), rg))
    }

    pub fn spatial(&mut self, x: Var, kind: Spatial) -> Result<Var> {
        let value = self.value(x).spatial(kind)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Spatial(x, kind), rg))
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone())?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|x| -x))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, "mul'", |g, y| g * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(va, "mul'", |g, x| g * x)?)?;
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, "div'", |g, y| g / y)?)?;
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = out.zip_map(vb, "div'", |q, y| -q / y)?;
                    self.accumulate(grads, *b, g.zip_map(&q, "div'", |g, d| g * d)?)?;
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g)?,
            Op::MulScalar(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s))?
            }
            Op::Powf(a, e) => {
                let e = *e;
                let d = g.zip_map(self.value(*a), "powf'", |g, x| {
                    g * e * x.powf(e - T::one())
                })?;
                self.accumulate(grads, *a, d)?
            }
            Op::Sqr(a) => {
                let two = T::one() + T::one();
                let d = g.zip_map(self.value(*a), "sqr'", |g, x| g * two * x)?;
                self.accumulate(grads, *a, d)?
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), "abs'", |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, d)?
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), "relu'", |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, d)?
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(self.value(*a), "clamp'", |g, x| {
                    if x >= lo && x <= hi {
                        g
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, d)?
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv))?
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1);
                let gv = g.data()[0] / T::from_usize(n).unwrap();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv))?
            }
            Op::Conv2d { x, w, b } => {
                let (ci, h, wd) = self.value(*x).chw()?;
                let ws = self.shape(*w);
                let dims = ConvDims {
                    c_in: ci,
                    c_out: ws[0],
                    h,
                    w: wd,
                    k: ws[2],
                };
                let need = (
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    self.requires_grad(*b),
                );
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &dims,
                    need,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw)?)?;
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), db)?)?;
                }
            }
            Op::Filter { x, kernel } => {
                let (c, h, w) = self.value(*x).chw()?;
                let dx = ops::filter_backward(g.data(), c, h, w, kernel);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?
            }
            Op::PadIndexed { x, pad, mode } => {
                let (c, h, w) = self.value(*x).chw()?;
                let (_, oh, ow) = g.chw()?;
                let mut dx = vec![T::zero(); c * h * w];
                let gd = g.data();
                for ch in 0..c {
                    for y in 0..oh {
                        let sy = mode.source(y as isize - pad.top as isize, h);
                        for xx in 0..ow {
                            let sx = mode.source(xx as isize - pad.left as isize, w);
                            dx[ch * h * w + sy * w + sx] += gd[ch * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?
            }
            Op::PadZero { x, pad } => {
                let (c, h, w) = self.value(*x).chw()?;
                let (_, oh, ow) = g.chw()?;
                let gd = g.data();
                let mut dx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    for y in 0..h {
                        let s = ch * oh * ow + (y + pad.top) * ow + pad.left;
                        dx.extend_from_slice(&gd[s..s + w]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?
            }
            Op::Crop { x, y0, x0 } => {
                let (c, ih, iw) = self.value(*x).chw()?;
                let (_, h, w) = g.chw()?;
                let gd = g.data();
                let mut dx = vec![T::zero(); c * ih * iw];
                for ch in 0..c {
                    for y in 0..h {
                        let d = ch * ih * iw + (y0 + y) * iw + x0;
                        dx[d..d + w].copy_from_slice(&gd[ch * h * w + y * w..ch * h * w + (y + 1) * w]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let part = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    self.accumulate(grads, p, Tensor::new(self.shape(p), part)?)?;
                }
            }
            Op::Narrow { x, start } => {
                let (_, h, w) = self.value(*x).chw()?;
                let mut dx = Tensor::zeros(self.shape(*x));
                let s = start * h * w;
                dx.data_mut()[s..s + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx)?
            }
            Op::MeanChannels(x) => {
                let (c, _, _) = self.value(*x).chw()?;
                let inv = T::one() / T::from_usize(c).unwrap();
                let dx: Vec<T> = (0..c).flat_map(|_| g.data().iter().map(|&v| v * inv)).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?
            }
            Op::Broadcast(x) => {
                let n = self.value(*x).numel();
                let mut dx = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (d, &v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?
            }
            Op::Spatial(x, kind) => self.accumulate(grads, *x, g.spatial(*kind)?)?,
        }
        Ok(())
    }
}
