//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Values live in the graph and are
//! addressed by [`Var`] handles. Leaves created with [`Graph::param`] are tracked: after
//! [`Graph::backward`] their gradient buffers hold `∂loss/∂leaf`, accumulated across
//! repeated calls until [`Graph::zero_grad`].
//!
//! Only the operations the enhancement networks need are provided: same-size 3×3
//! convolution, channel concat/slice, 2×2 average pooling with nearest upsampling,
//! elementwise arithmetic and activations, crops, reflect padding, bilinear resize,
//! forward differences and mean/sum reductions.

mod conv;
mod gradcheck;
mod tensor;

pub use conv::{conv2d_3x3, im2col};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::image::{bilinear_taps, reflect_index, CropWindow, Tap};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Sqrt,
    Clamp01,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Map(Var, fn(T) -> T),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Expand(Var),
    Conv { x: Var, w: Var, b: Var, cols: Vec<T> },
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    BroadcastChannels(Var),
    ChannelMean(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Crop(Var, CropWindow),
    PadReflect(Var),
    Resize(Var, Vec<Tap>, Vec<Tap>),
    DiffX(Var),
    DiffY(Var),
    Curve(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked: false,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Tracked leaf: receives a gradient buffer on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].tracked = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf, `None` before any backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims3(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).dims3()
    }

    // ---- elementwise ----

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{op:?}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let f: fn(T) -> T = match op {
            UnaryOp::Relu => |v| if v > T::ZERO { v } else { T::ZERO },
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => |v| v.tanh(),
            UnaryOp::Abs => |v| v.abs(),
            UnaryOp::Sqrt => |v| v.sqrt(),
            UnaryOp::Clamp01 => |v| {
                if v < T::ZERO {
                    T::ZERO
                } else if v > T::ONE {
                    T::ONE
                } else {
                    v
                }
            },
        };
        let out = self.value(x).map(f);
        let ng = self.needs(&[x]);
        self.push(out, Op::Unary(op, x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sqrt, x)
    }

    /// Clamp into [0, 1]; gradient passes through strictly inside the interval, zero outside.
    pub fn clamp01(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Clamp01, x)
    }

    /// Caller-supplied elementwise function with its derivative.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let ng = self.needs(&[x]);
        self.push(out, Op::Map(x, df), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.needs(&[x]);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// `x · s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape("scale_by expects a one-element factor".into()));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        let ng = self.needs(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), ng))
    }

    /// Fills `shape` with the value of a one-element tensor.
    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape("expand expects a one-element source".into()));
        }
        let out = Tensor::filled(shape, self.value(s).item());
        let ng = self.needs(&[s]);
        Ok(self.push(out, Op::Expand(s), ng))
    }

    /// `x + alpha·x·(1 − x)` elementwise.
    pub fn curve(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (tx, ta) = (self.value(x), self.value(alpha));
        if tx.shape() != ta.shape() {
            return Err(Error::Shape(format!(
                "curve: {:?} vs {:?}",
                tx.shape(),
                ta.shape()
            )));
        }
        let data = tx
            .data()
            .iter()
            .zip(ta.data())
            .map(|(&v, &a)| v + a * v * (T::ONE - v))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x, alpha]);
        Ok(self.push(out, Op::Curve(x, alpha), ng))
    }

    // ---- convolution and layout ----

    /// Same-size 3×3 convolution, zero padding 1, stride 1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (out, cols) = conv::forward(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv { x, w, b, cols }, ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of no tensors".into()));
        }
        let (_, h, w) = self.dims3(parts[0])?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.dims3(p)?;
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat: spatial {ph}x{pw} vs {h}x{w}"
                )));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![c_total, h, w], data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} of {c}",
                start + len
            )));
        }
        let n = h * w;
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, h, w], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SliceChannels(x, start), ng))
    }

    pub fn split_channels(&mut self, x: Var) -> Result<Vec<Var>> {
        let (c, _, _) = self.dims3(x)?;
        (0..c).map(|i| self.slice_channels(x, i, 1)).collect()
    }

    /// Replicates a single-channel map `channels` times.
    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if c != 1 || channels == 0 {
            return Err(Error::Shape(format!("broadcast needs 1 channel, got {c}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(src);
        }
        let out = Tensor::new(vec![channels, h, w], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::BroadcastChannels(x), ng))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let n = h * w;
        let src = self.value(x).data();
        let inv = T::ONE / T::from_f64(c as f64);
        let data = (0..n)
            .map(|i| (0..c).map(|k| src[k * n + i]).sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![1, h, w], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::ChannelMean(x), ng))
    }

    /// 2×2 average pooling, stride 2. Height and width must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 needs even dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = T::from_f64(0.25);
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let p = &src[ch * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    data.push((p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) * q);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::AvgPool2(x), ng))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let row = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                for xx in 0..ow {
                    data.push(row[xx / 2]);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample2(x), ng))
    }

    pub fn crop(&mut self, x: Var, win: CropWindow) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if win.height == 0 || win.width == 0 || win.y0 + win.height > h || win.x0 + win.width > w
        {
            return Err(Error::InvalidArgument(format!("crop {win:?} outside {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * win.height * win.width);
        for ch in 0..c {
            for y in win.y0..win.y0 + win.height {
                let base = (ch * h + y) * w + win.x0;
                data.extend_from_slice(&src[base..base + win.width]);
            }
        }
        let out = Tensor::new(vec![c, win.height, win.width], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Crop(x, win), ng))
    }

    /// Mirror-pads bottom and right edges up to `out_h × out_w`.
    pub fn pad_reflect(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if out_h < h || out_w < w {
            return Err(Error::InvalidArgument("pad target smaller than input".into()));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for y in 0..out_h {
                let row = (ch * h + reflect_index(y, h)) * w;
                for xx in 0..out_w {
                    data.push(src[row + reflect_index(xx, w)]);
                }
            }
        }
        let out = Tensor::new(vec![c, out_h, out_w], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::PadReflect(x), ng))
    }

    /// Bilinear resize with half-pixel centres (no clamping).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resize to empty size".into()));
        }
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            for ty in &ys {
                let (fy0, fy1) = (T::from_f64(1.0 - ty.frac), T::from_f64(ty.frac));
                for tx in &xs {
                    let (fx0, fx1) = (T::from_f64(1.0 - tx.frac), T::from_f64(tx.frac));
                    let top = p[ty.i0 * w + tx.i0] * fx0 + p[ty.i0 * w + tx.i1] * fx1;
                    let bot = p[ty.i1 * w + tx.i0] * fx0 + p[ty.i1 * w + tx.i1] * fx1;
                    data.push(top * fy0 + bot * fy1);
                }
            }
        }
        let out = Tensor::new(vec![c, out_h, out_w], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Resize(x, ys, xs), ng))
    }

    fn diff(&mut self, x: Var, horizontal: bool) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if h < 2 || w < 2 {
            return Err(Error::InvalidArgument(format!(
                "forward differences need H, W >= 2, got {h}x{w}"
            )));
        }
        let step = if horizontal { 1 } else { w };
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * (h - 1) * (w - 1));
        for ch in 0..c {
            for y in 0..h - 1 {
                for xx in 0..w - 1 {
                    let i = (ch * h + y) * w + xx;
                    data.push(src[i + step] - src[i]);
                }
            }
        }
        let out = Tensor::new(vec![c, h - 1, w - 1], data)?;
        let ng = self.needs(&[x]);
        let op = if horizontal { Op::DiffX(x) } else { Op::DiffY(x) };
        Ok(self.push(out, op, ng))
    }

    /// `x[c, i, j+1] − x[c, i, j]` over the valid region `i < H−1, j < W−1`.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        self.diff(x, true)
    }

    /// `x[c, i+1, j] − x[c, i, j]` over the valid region `i < H−1, j < W−1`.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        self.diff(x, false)
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::InvalidArgument("sum of empty tensor".into()));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let m = self.value(x).mean();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), ng))
    }

    // ---- backward ----

    /// Accumulates `∂loss/∂leaf` into every tracked leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut tmp: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if node.tracked {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => {
                        *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            self.backward_node(i, &g, &mut tmp);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], tmp: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: &Var| nodes[v.0].value.data();
        let wants = |v: &Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = tmp[v.0].get_or_insert_with(|| vec![T::ZERO; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (xa, xb) = (val(a), val(b));
                match op {
                    BinaryOp::Add => {
                        acc(*a, &mut |d| add_into(d, g));
                        acc(*b, &mut |d| add_into(d, g));
                    }
                    BinaryOp::Sub => {
                        acc(*a, &mut |d| add_into(d, g));
                        acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
                    }
                    BinaryOp::Mul => {
                        acc(*a, &mut |d| {
                            for k in 0..d.len() {
                                d[k] += g[k] * xb[k];
                            }
                        });
                        acc(*b, &mut |d| {
                            for k in 0..d.len() {
                                d[k] += g[k] * xa[k];
                            }
                        });
                    }
                    BinaryOp::Div => {
                        acc(*a, &mut |d| {
                            for k in 0..d.len() {
                                d[k] += g[k] / xb[k];
                            }
                        });
                        acc(*b, &mut |d| {
                            for k in 0..d.len() {
                                d[k] -= g[k] * xa[k] / (xb[k] * xb[k]);
                            }
                        });
                    }
                }
            }
            Op::Unary(op, x) => {
                let xs = val(x);
                let ys = node.value.data();
                let op = *op;
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        let (xv, yv) = (xs[k], ys[k]);
                        let dy = match op {
                            UnaryOp::Relu => {
                                if xv > T::ZERO {
                                    T::ONE
                                } else {
                                    T::ZERO
                                }
                            }
                            UnaryOp::Sigmoid => yv * (T::ONE - yv),
                            UnaryOp::Tanh => T::ONE - yv * yv,
                            UnaryOp::Abs => {
                                if xv > T::ZERO {
                                    T::ONE
                                } else if xv < T::ZERO {
                                    -T::ONE
                                } else {
                                    T::ZERO
                                }
                            }
                            UnaryOp::Sqrt => T::from_f64(0.5) / yv,
                            UnaryOp::Clamp01 => {
                                if xv > T::ZERO && xv < T::ONE {
                                    T::ONE
                                } else {
                                    T::ZERO
                                }
                            }
                        };
                        d[k] += g[k] * dy;
                    }
                });
            }
            Op::Map(x, df) => {
                let xs = val(x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * df(xs[k]);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
            }),
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::ScaleBy(x, s) => {
                let k = val(s)[0];
                let xs = val(x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * k));
                acc(*s, &mut |d| d[0] += g.iter().zip(xs).map(|(&g, &x)| g * x).sum::<T>());
            }
            Op::Expand(s) => acc(*s, &mut |d| d[0] += g.iter().copied().sum::<T>()),
            Op::Curve(x, a) => {
                let (xs, al) = (val(x), val(a));
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (T::ONE + al[k] * (T::ONE - xs[k] - xs[k]));
                    }
                });
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * xs[k] * (T::ONE - xs[k]);
                    }
                });
            }
            Op::Conv { x, w, b, cols } => {
                let (c, h, wd) = nodes[x.0].value.dims3().expect("conv input is 3-d");
                let wv = &nodes[w.0].value;
                let o = wv.shape()[0];
                let n = h * wd;
                let k = c * 9;
                acc(*b, &mut |d| {
                    for oc in 0..o {
                        d[oc] += g[oc * n..(oc + 1) * n].iter().copied().sum::<T>();
                    }
                });
                acc(*w, &mut |d| conv::grad_weight(g, cols, o, k, n, d));
                if wants(x) {
                    let dcols = conv::grad_cols(g, wv.data(), o, k, n);
                    acc(*x, &mut |d| conv::col2im(&dcols, c, h, wd, d));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceChannels(x, start) => {
                let n = g.len();
                let off = start * (n / node.value.shape()[0]);
                acc(*x, &mut |d| add_into(&mut d[off..off + n], g));
            }
            Op::BroadcastChannels(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, &mut |d| {
                    for chunk in g.chunks_exact(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::ChannelMean(x) => {
                let n = g.len();
                let c = nodes[x.0].value.numel() / n;
                let inv = T::ONE / T::from_f64(c as f64);
                acc(*x, &mut |d| {
                    for chunk in d.chunks_exact_mut(n) {
                        chunk.iter_mut().zip(g).for_each(|(d, &g)| *d += g * inv);
                    }
                });
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = nodes[x.0].value.dims3().expect("3-d");
                let (oh, ow) = (h / 2, w / 2);
                let q = T::from_f64(0.25);
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = g[(ch * oh + y) * ow + xx] * q;
                                let i = (ch * h + 2 * y) * w + 2 * xx;
                                d[i] += gv;
                                d[i + 1] += gv;
                                d[i + w] += gv;
                                d[i + w + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (c, h, w) = nodes[x.0].value.dims3().expect("3-d");
                let ow = 2 * w;
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..ow {
                                d[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Crop(x, win) => {
                let (c, h, w) = nodes[x.0].value.dims3().expect("3-d");
                acc(*x, &mut |d| {
                    let mut k = 0;
                    for ch in 0..c {
                        for y in win.y0..win.y0 + win.height {
                            let base = (ch * h + y) * w + win.x0;
                            add_into(&mut d[base..base + win.width], &g[k..k + win.width]);
                            k += win.width;
                        }
                    }
                });
            }
            Op::PadReflect(x) => {
                let (c, h, w) = nodes[x.0].value.dims3().expect("3-d");
                let (_, oh, ow) = node.value.dims3().expect("3-d");
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        for y in 0..oh {
                            let row = (ch * h + reflect_index(y, h)) * w;
                            for xx in 0..ow {
                                d[row + reflect_index(xx, w)] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Resize(x, ys, xs) => {
                let (c, h, w) = nodes[x.0].value.dims3().expect("3-d");
                let (oh, ow) = (ys.len(), xs.len());
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        let p = &mut d[ch * h * w..(ch + 1) * h * w];
                        for (yi, ty) in ys.iter().enumerate() {
                            let (fy0, fy1) = (T::from_f64(1.0 - ty.frac), T::from_f64(ty.frac));
                            for (xi, tx) in xs.iter().enumerate() {
                                let (fx0, fx1) =
                                    (T::from_f64(1.0 - tx.frac), T::from_f64(tx.frac));
                                let gv = g[(ch * oh + yi) * ow + xi];
                                p[ty.i0 * w + tx.i0] += gv * fy0 * fx0;
                                p[ty.i0 * w + tx.i1] += gv * fy0 * fx1;
                                p[ty.i1 * w + tx.i0] += gv * fy1 * fx0;
                                p[ty.i1 * w + tx.i1] += gv * fy1 * fx1;
                            }
                        }
                    }
                });
            }
            Op::DiffX(x) | Op::DiffY(x) => {
                let (c, h, w) = nodes[x.0].value.dims3().expect("3-d");
                let step = if matches!(node.op, Op::DiffX(_)) { 1 } else { w };
                acc(*x, &mut |d| {
                    let mut k = 0;
                    for ch in 0..c {
                        for y in 0..h - 1 {
                            for xx in 0..w - 1 {
                                let i = (ch * h + y) * w + xx;
                                d[i + step] += g[k];
                                d[i] -= g[k];
                                k += 1;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let inv = g[0] / T::from_f64(nodes[x.0].value.numel() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += inv));
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

#[inline]
fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}
