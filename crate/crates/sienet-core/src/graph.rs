//! Tape-based reverse-mode differentiation over rank-4 tensors.
//!
//! A [`Graph`] records every executed operation together with the values
//! needed for its backward pass. [`Graph::backward`] replays the tape in
//! exact reverse execution order, accumulating gradients for every node that
//! (transitively) requires them. Graph execution is single-threaded and all
//! reductions run in a fixed order, so identical inputs produce bit-identical
//! outputs and gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// Elementwise / per-channel transforms selectable by kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Slope 0.2 on the negative side.
    LeakyRelu,
    Tanh,
    Sigmoid,
    /// Per-(sample, channel) normalization to mean 0, variance 1 (eps 1e-5).
    InstanceNorm,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

enum Op<T> {
    Leaf,
    Detach,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BoxSum { x: Var, k: usize },
    ReflectPad { x: Var, pad: usize },
    NearestUpsample { x: Var, factor: usize },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Abs { x: Var },
    Sqrt { x: Var },
    InstanceNorm { x: Var, stats: Vec<(T, T)> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleShift { x: Var, scale: T },
    MeanAll { x: Var },
    SumAll { x: Var },
    ConcatCh { xs: Vec<Var> },
    Gram { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    finite: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.id].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.id].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Gradients of all named parameters, in registration order.
    pub fn named_grads(&self) -> Vec<(&str, &[T])> {
        self.param_order
            .iter()
            .filter_map(|name| {
                let var = self.params[name];
                self.nodes[var.id].grad.as_deref().map(|g| (name.as_str(), g))
            })
            .collect()
    }

    /// Move the named parameter gradients out of the graph (registration
    /// order); the training loop consumes them without copying.
    pub fn take_named_grads(&mut self) -> Vec<(String, Vec<T>)> {
        let order = std::mem::take(&mut self.param_order);
        order
            .into_iter()
            .filter_map(|name| {
                let var = self.params[&name];
                self.nodes[var.id].grad.take().map(|g| (name, g))
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let finite = value.is_finite();
        self.nodes.push(Node { value, grad: None, requires_grad, finite, op });
        Var { id: self.nodes.len() - 1 }
    }

    fn check_finite(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        for v in vars {
            if !self.nodes[v.id].finite {
                return Err(Error::NonFinite { op });
            }
        }
        Ok(())
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(t.clone(), requires_grad, Op::Leaf))
    }

    /// Constant input: no gradient flows into it.
    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Trainable leaf registered under `name`. Re-registering the same name
    /// with the same backing buffer returns the existing node, so a module
    /// run twice in one graph (the siamese pattern) accumulates into a
    /// single gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>, requires_grad: bool) -> Result<Var> {
        if let Some(&existing) = self.params.get(name) {
            if !Arc::ptr_eq(self.nodes[existing.id].value.buffer(), t.buffer()) {
                return Err(Error::BadArg {
                    op: "param",
                    reason: format!("parameter `{name}` re-registered with a different tensor"),
                });
            }
            return Ok(existing);
        }
        let var = self.leaf(t, requires_grad)?;
        self.params.insert(name.to_string(), var);
        self.param_order.push(name.to_string());
        Ok(var)
    }

    /// Value pass-through that blocks the gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.id].value.clone();
        self.push(value, false, Op::Detach)
    }

    // ── Convolution and spatial ops ─────────────────────────────────────

    /// Cross-correlation (no kernel flip) with zero padding.
    /// `w` is (out_ch, in_ch, kh, kw); `b`, when present, is (1, out_ch, 1, 1).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let mut inputs = vec![x, w];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        self.check_finite("conv2d", &inputs)?;
        if stride < 1 {
            return Err(Error::BadArg { op: "conv2d", reason: "stride must be >= 1".into() });
        }
        if ws.c != xs.c {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != Shape::new(1, ws.b, 1, 1) {
                return Err(Error::BadShape {
                    op: "conv2d",
                    shape: bs,
                    reason: format!("bias must be (1, {}, 1, 1)", ws.b),
                });
            }
        }
        let geo = ConvGeometry::new(xs.h, xs.w, ws.h, ws.w, stride, pad).ok_or(Error::BadShape {
            op: "conv2d",
            shape: xs,
            reason: "kernel larger than padded input".into(),
        })?;
        let out_shape = Shape::new(xs.b, ws.b, geo.out_h, geo.out_w);

        let (out_ch, ck) = (ws.b, ws.c * ws.h * ws.w);
        let patch = geo.out_h * geo.out_w;
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut cols = vec![T::zero(); ck * patch];
        let x_data = self.nodes[x.id].value.data();
        let w_data = self.nodes[w.id].value.data();
        for bi in 0..xs.b {
            let img = &x_data[bi * xs.c * xs.plane()..(bi + 1) * xs.c * xs.plane()];
            kernels::im2col(img, xs.c, xs.h, xs.w, &geo, &mut cols);
            let dst = &mut out[bi * out_ch * patch..(bi + 1) * out_ch * patch];
            kernels::matmul(w_data, &cols, dst, out_ch, ck, patch);
        }
        if let Some(bv) = b {
            let b_data: Vec<T> = self.nodes[bv.id].value.data().to_vec();
            for bi in 0..xs.b {
                for (oc, &bias) in b_data.iter().enumerate() {
                    let row = (bi * out_ch + oc) * patch;
                    for v in &mut out[row..row + patch] {
                        *v = *v + bias;
                    }
                }
            }
        }

        let rg = self.any_requires_grad(&inputs);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            rg,
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// Per-channel k x k neighborhood sum, stride 1, zero padding (k-1)/2.
    pub fn box_sum(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check_finite("box_sum", &[x])?;
        if k % 2 == 0 || k == 0 {
            return Err(Error::BadArg { op: "box_sum", reason: format!("kernel size {k} must be odd") });
        }
        let shape = self.shape(x);
        let mut out = vec![T::zero(); shape.numel()];
        kernels::box_sum(self.nodes[x.id].value.data(), shape, k, &mut out);
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(Tensor::from_vec(shape, out)?, rg, Op::BoxSum { x, k }))
    }

    /// Mirror padding (without repeating the border pixel) on all four sides.
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        self.check_finite("reflect_pad", &[x])?;
        let s = self.shape(x);
        if pad >= s.h || pad >= s.w {
            return Err(Error::BadShape {
                op: "reflect_pad",
                shape: s,
                reason: format!("pad {pad} too large for reflection"),
            });
        }
        let out_shape = Shape::new(s.b, s.c, s.h + 2 * pad, s.w + 2 * pad);
        let mut out = vec![T::zero(); out_shape.numel()];
        let data = self.nodes[x.id].value.data();
        for plane in 0..s.b * s.c {
            let src = &data[plane * s.plane()..(plane + 1) * s.plane()];
            let dst = &mut out[plane * out_shape.plane()..(plane + 1) * out_shape.plane()];
            for oy in 0..out_shape.h {
                let sy = reflect_index(oy as isize - pad as isize, s.h);
                for ox in 0..out_shape.w {
                    let sx = reflect_index(ox as isize - pad as isize, s.w);
                    dst[oy * out_shape.w + ox] = src[sy * s.w + sx];
                }
            }
        }
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(Tensor::from_vec(out_shape, out)?, rg, Op::ReflectPad { x, pad }))
    }

    /// Each output pixel copies its floor-divided source pixel.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check_finite("upsample_nearest", &[x])?;
        if factor < 1 {
            return Err(Error::BadArg { op: "upsample_nearest", reason: "factor must be >= 1".into() });
        }
        let s = self.shape(x);
        let out_shape = Shape::new(s.b, s.c, s.h * factor, s.w * factor);
        let mut out = vec![T::zero(); out_shape.numel()];
        let data = self.nodes[x.id].value.data();
        for plane in 0..s.b * s.c {
            let src = &data[plane * s.plane()..(plane + 1) * s.plane()];
            let dst = &mut out[plane * out_shape.plane()..(plane + 1) * out_shape.plane()];
            for oy in 0..out_shape.h {
                let sy = oy / factor;
                for ox in 0..out_shape.w {
                    dst[oy * out_shape.w + ox] = src[sy * s.w + ox / factor];
                }
            }
        }
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(Tensor::from_vec(out_shape, out)?, rg, Op::NearestUpsample { x, factor }))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check_finite(name, &[x])?;
        let value = self.nodes[x.id].value.map(f);
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(value, rg, op))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        let slope = T::from_f64(LEAKY_SLOPE);
        self.unary(
            "leaky_relu",
            x,
            move |v| if v > T::zero() { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, stable_sigmoid, Op::Sigmoid { x })
    }

    /// ln(1 + e^x) in the overflow-free form max(x, 0) + ln(1 + e^-|x|).
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "softplus",
            x,
            |v| v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln(),
            Op::Softplus { x },
        )
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt { x })
    }

    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        self.check_finite("instance_norm", &[x])?;
        let s = self.shape(x);
        let n = s.plane();
        let eps = T::from_f64(INSTANCE_NORM_EPS);
        let data = self.nodes[x.id].value.data();
        let mut out = vec![T::zero(); s.numel()];
        let mut stats = Vec::with_capacity(s.b * s.c);
        let inv_n = T::one() / T::from_usize(n);
        for plane in 0..s.b * s.c {
            let src = &data[plane * n..(plane + 1) * n];
            let mean = kernels::det_sum(src) * inv_n;
            let mut var_acc = T::zero();
            for chunk in src.chunks(4096) {
                let mut s_local = T::zero();
                for &v in chunk {
                    let d = v - mean;
                    s_local = s_local + d * d;
                }
                var_acc = var_acc + s_local;
            }
            let var = var_acc * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            stats.push((mean, inv_std));
            let dst = &mut out[plane * n..(plane + 1) * n];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * inv_std;
            }
        }
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(Tensor::from_vec(s, out)?, rg, Op::InstanceNorm { x, stats }))
    }

    /// Activation / normalization dispatch by kind.
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::LeakyRelu => self.leaky_relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::InstanceNorm => self.instance_norm(x),
        }
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sa.broadcasts_with(&sb) {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(Shape::new(sa.b, sa.c.max(sb.c), sa.h, sa.w))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.check_finite(name, &[a, b])?;
        let out_shape = self.binary_shape(name, a, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ad = self.nodes[a.id].value.data();
        let bd = self.nodes[b.id].value.data();
        let mut out = vec![T::zero(); out_shape.numel()];
        let n = out_shape.plane();
        for bi in 0..out_shape.b {
            for ci in 0..out_shape.c {
                let ap = (bi * sa.c + ci.min(sa.c - 1)) * n;
                let bp = (bi * sb.c + ci.min(sb.c - 1)) * n;
                let op_ = (bi * out_shape.c + ci) * n;
                for i in 0..n {
                    out[op_ + i] = f(ad[ap + i], bd[bp + i]);
                }
            }
        }
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(out_shape, out)?, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale_shift(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        if !scale.is_finite() || !shift.is_finite() {
            return Err(Error::NonFinite { op: "scale_shift" });
        }
        self.unary("scale_shift", x, move |v| scale * v + shift, Op::ScaleShift { x, scale })
    }

    // ── Reductions and assembly ─────────────────────────────────────────

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.check_finite("mean_all", &[x])?;
        let n = T::from_usize(self.shape(x).numel());
        let total = kernels::det_sum(self.nodes[x.id].value.data());
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(Tensor::scalar(total / n), rg, Op::MeanAll { x }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_finite("sum_all", &[x])?;
        let total = kernels::det_sum(self.nodes[x.id].value.data());
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(Tensor::scalar(total), rg, Op::SumAll { x }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::BadArg { op: "concat_channels", reason: "no inputs".into() });
        }
        self.check_finite("concat_channels", xs)?;
        let first = self.shape(xs[0]);
        let mut total_c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.b, s.h, s.w) != (first.b, first.h, first.w) {
                return Err(Error::ShapeMismatch { op: "concat_channels", lhs: first, rhs: s });
            }
            total_c += s.c;
        }
        let out_shape = Shape::new(first.b, total_c, first.h, first.w);
        let n = first.plane();
        let mut out = vec![T::zero(); out_shape.numel()];
        for bi in 0..first.b {
            let mut c_off = 0;
            for &v in xs {
                let s = self.shape(v);
                let src = self.nodes[v.id].value.data();
                let src_block = &src[bi * s.c * n..(bi + 1) * s.c * n];
                let dst_start = (bi * total_c + c_off) * n;
                out[dst_start..dst_start + s.c * n].copy_from_slice(src_block);
                c_off += s.c;
            }
        }
        let rg = self.any_requires_grad(xs);
        Ok(self.push(Tensor::from_vec(out_shape, out)?, rg, Op::ConcatCh { xs: xs.to_vec() }))
    }

    /// Channel covariance statistic: G[b] = X_b X_b^T / (C*H*W) where X_b is
    /// the (C, H*W) unfolding. Output shape (B, 1, C, C).
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        self.check_finite("gram", &[x])?;
        let s = self.shape(x);
        let (c, p) = (s.c, s.plane());
        let norm = T::one() / T::from_usize(c * p);
        let out_shape = Shape::new(s.b, 1, c, c);
        let mut out = vec![T::zero(); out_shape.numel()];
        let data = self.nodes[x.id].value.data();
        for bi in 0..s.b {
            let img = &data[bi * c * p..(bi + 1) * c * p];
            let dst = &mut out[bi * c * c..(bi + 1) * c * c];
            kernels::matmul_abt_acc(img, img, dst, c, p, c);
            for v in dst.iter_mut() {
                *v = *v * norm;
            }
        }
        let rg = self.nodes[x.id].requires_grad;
        Ok(self.push(Tensor::from_vec(out_shape, out)?, rg, Op::Gram { x }))
    }

    fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients for every reachable node
    /// that requires them start at zero and accumulate in reverse execution
    /// order. Errors if the loss is non-scalar or non-finite, or if called a
    /// second time without building a new graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss_shape });
        }
        if !self.nodes[loss.id].finite {
            return Err(Error::NonFinite { op: "backward" });
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut need = vec![false; n];
        need[loss.id] = self.nodes[loss.id].requires_grad;
        for i in (0..=loss.id).rev() {
            if !need[i] {
                continue;
            }
            for input in op_inputs(&self.nodes[i].op) {
                if self.nodes[input.id].requires_grad {
                    need[input.id] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for i in (0..=loss.id).rev() {
            if !need[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads, &need)?;
            grads[i] = Some(g);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads.into_iter()) {
            node.grad = grad;
        }
        Ok(())
    }

    fn vjp(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>], need: &[bool]) -> Result<()> {
        let out_shape = self.nodes[id].value.shape();
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach { .. } => {}

            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let geo = ConvGeometry::new(xs.h, xs.w, ws.h, ws.w, *stride, *pad).expect("validated");
                let (out_ch, ck) = (ws.b, ws.c * ws.h * ws.w);
                let patch = geo.out_h * geo.out_w;
                let x_data = self.nodes[x.id].value.data();
                let w_data = self.nodes[w.id].value.data();

                let need_x = need[x.id];
                let need_w = need[w.id];
                let mut cols = if need_w { vec![T::zero(); ck * patch] } else { Vec::new() };
                let mut dcols = if need_x { vec![T::zero(); ck * patch] } else { Vec::new() };

                for bi in 0..xs.b {
                    let g_b = &g[bi * out_ch * patch..(bi + 1) * out_ch * patch];
                    if need_w {
                        let img = &x_data[bi * xs.c * xs.plane()..(bi + 1) * xs.c * xs.plane()];
                        kernels::im2col(img, xs.c, xs.h, xs.w, &geo, &mut cols);
                        let dw = grad_slot(grads, w.id, ws.numel());
                        kernels::matmul_abt_acc(g_b, &cols, dw, out_ch, patch, ck);
                    }
                    if need_x {
                        kernels::matmul_atb(w_data, g_b, &mut dcols, out_ch, ck, patch);
                        let mut dx_b = vec![T::zero(); xs.c * xs.plane()];
                        kernels::col2im(&dcols, xs.c, xs.h, xs.w, &geo, &mut dx_b);
                        let dx = grad_slot(grads, x.id, xs.numel());
                        let base = bi * xs.c * xs.plane();
                        for (slot, v) in dx[base..base + dx_b.len()].iter_mut().zip(dx_b) {
                            *slot = *slot + v;
                        }
                    }
                }
                if let Some(bv) = b {
                    if need[bv.id] {
                        let db = grad_slot(grads, bv.id, out_ch);
                        for bi in 0..xs.b {
                            for oc in 0..out_ch {
                                let row = (bi * out_ch + oc) * patch;
                                db[oc] = db[oc] + kernels::det_sum(&g[row..row + patch]);
                            }
                        }
                    }
                }
            }

            Op::BoxSum { x, k } => {
                if need[x.id] {
                    let s = self.shape(*x);
                    let mut dg = vec![T::zero(); s.numel()];
                    kernels::box_sum(g, s, *k, &mut dg);
                    accumulate(grads, x.id, &dg);
                }
            }

            Op::ReflectPad { x, pad } => {
                if need[x.id] {
                    let s = self.shape(*x);
                    let dx = grad_slot(grads, x.id, s.numel());
                    for plane in 0..s.b * s.c {
                        let gsrc = &g[plane * out_shape.plane()..(plane + 1) * out_shape.plane()];
                        let dst = &mut dx[plane * s.plane()..(plane + 1) * s.plane()];
                        for oy in 0..out_shape.h {
                            let sy = reflect_index(oy as isize - *pad as isize, s.h);
                            for ox in 0..out_shape.w {
                                let sx = reflect_index(ox as isize - *pad as isize, s.w);
                                dst[sy * s.w + sx] = dst[sy * s.w + sx] + gsrc[oy * out_shape.w + ox];
                            }
                        }
                    }
                }
            }

            Op::NearestUpsample { x, factor } => {
                if need[x.id] {
                    let s = self.shape(*x);
                    let f = *factor;
                    let dx = grad_slot(grads, x.id, s.numel());
                    for plane in 0..s.b * s.c {
                        let gsrc = &g[plane * out_shape.plane()..(plane + 1) * out_shape.plane()];
                        let dst = &mut dx[plane * s.plane()..(plane + 1) * s.plane()];
                        for sy in 0..s.h {
                            for sx in 0..s.w {
                                let mut acc = T::zero();
                                for dy in 0..f {
                                    let row = (sy * f + dy) * out_shape.w + sx * f;
                                    for dxx in 0..f {
                                        acc = acc + gsrc[row + dxx];
                                    }
                                }
                                dst[sy * s.w + sx] = dst[sy * s.w + sx] + acc;
                            }
                        }
                    }
                }
            }

            Op::Relu { x } => {
                if need[x.id] {
                    let xd = self.nodes[x.id].value.data();
                    let dx = grad_slot(grads, x.id, xd.len());
                    for i in 0..xd.len() {
                        if xd[i] > T::zero() {
                            dx[i] = dx[i] + g[i];
                        }
                    }
                }
            }

            Op::LeakyRelu { x, slope } => {
                if need[x.id] {
                    let xd = self.nodes[x.id].value.data();
                    let dx = grad_slot(grads, x.id, xd.len());
                    for i in 0..xd.len() {
                        let f = if xd[i] > T::zero() { T::one() } else { *slope };
                        dx[i] = dx[i] + g[i] * f;
                    }
                }
            }

            Op::Tanh { x } => {
                if need[x.id] {
                    let yd = self.nodes[id].value.data();
                    let dx = grad_slot(grads, x.id, yd.len());
                    for i in 0..yd.len() {
                        dx[i] = dx[i] + g[i] * (T::one() - yd[i] * yd[i]);
                    }
                }
            }

            Op::Sigmoid { x } => {
                if need[x.id] {
                    let yd = self.nodes[id].value.data();
                    let dx = grad_slot(grads, x.id, yd.len());
                    for i in 0..yd.len() {
                        dx[i] = dx[i] + g[i] * yd[i] * (T::one() - yd[i]);
                    }
                }
            }

            Op::Softplus { x } => {
                if need[x.id] {
                    let xd = self.nodes[x.id].value.data();
                    let dx = grad_slot(grads, x.id, xd.len());
                    for i in 0..xd.len() {
                        dx[i] = dx[i] + g[i] * stable_sigmoid(xd[i]);
                    }
                }
            }

            Op::Abs { x } => {
                if need[x.id] {
                    let xd = self.nodes[x.id].value.data();
                    let dx = grad_slot(grads, x.id, xd.len());
                    for i in 0..xd.len() {
                        let s = if xd[i] > T::zero() {
                            T::one()
                        } else if xd[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        dx[i] = dx[i] + g[i] * s;
                    }
                }
            }

            Op::Sqrt { x } => {
                if need[x.id] {
                    let yd = self.nodes[id].value.data();
                    let half = T::from_f64(0.5);
                    let dx = grad_slot(grads, x.id, yd.len());
                    for i in 0..yd.len() {
                        dx[i] = dx[i] + g[i] * half / yd[i];
                    }
                }
            }

            Op::InstanceNorm { x, stats } => {
                if need[x.id] {
                    let s = self.shape(*x);
                    let n = s.plane();
                    let inv_n = T::one() / T::from_usize(n);
                    let xd = self.nodes[x.id].value.data();
                    let dx = grad_slot(grads, x.id, xd.len());
                    for plane in 0..s.b * s.c {
                        let (mean, inv_std) = stats[plane];
                        let xs_ = &xd[plane * n..(plane + 1) * n];
                        let gs = &g[plane * n..(plane + 1) * n];
                        let mut g_sum = T::zero();
                        let mut gx_sum = T::zero();
                        for i in 0..n {
                            let xhat = (xs_[i] - mean) * inv_std;
                            g_sum = g_sum + gs[i];
                            gx_sum = gx_sum + gs[i] * xhat;
                        }
                        let g_mean = g_sum * inv_n;
                        let gx_mean = gx_sum * inv_n;
                        let dst = &mut dx[plane * n..(plane + 1) * n];
                        for i in 0..n {
                            let xhat = (xs_[i] - mean) * inv_std;
                            dst[i] = dst[i] + inv_std * (gs[i] - g_mean - xhat * gx_mean);
                        }
                    }
                }
            }

            Op::Add { a, b } => {
                self.binary_vjp(*a, *b, out_shape, g, grads, need, |_, _| (T::one(), T::one()));
            }

            Op::Sub { a, b } => {
                self.binary_vjp(*a, *b, out_shape, g, grads, need, |_, _| (T::one(), -T::one()));
            }

            Op::Mul { a, b } => {
                self.binary_vjp(*a, *b, out_shape, g, grads, need, |av, bv| (bv, av));
            }

            Op::ScaleShift { x, scale } => {
                if need[x.id] {
                    let dx = grad_slot(grads, x.id, g.len());
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * *scale;
                    }
                }
            }

            Op::MeanAll { x } => {
                if need[x.id] {
                    let numel = self.shape(*x).numel();
                    let gv = g[0] / T::from_usize(numel);
                    let dx = grad_slot(grads, x.id, numel);
                    for v in dx.iter_mut() {
                        *v = *v + gv;
                    }
                }
            }

            Op::SumAll { x } => {
                if need[x.id] {
                    let numel = self.shape(*x).numel();
                    let dx = grad_slot(grads, x.id, numel);
                    for v in dx.iter_mut() {
                        *v = *v + g[0];
                    }
                }
            }

            Op::ConcatCh { xs } => {
                let n = out_shape.plane();
                for bi in 0..out_shape.b {
                    let mut c_off = 0;
                    for &v in xs {
                        let s = self.shape(v);
                        if need[v.id] {
                            let dst = grad_slot(grads, v.id, s.numel());
                            let src_start = (bi * out_shape.c + c_off) * n;
                            let dst_start = bi * s.c * n;
                            for i in 0..s.c * n {
                                dst[dst_start + i] = dst[dst_start + i] + g[src_start + i];
                            }
                        }
                        c_off += s.c;
                    }
                }
            }

            Op::Gram { x } => {
                if need[x.id] {
                    let s = self.shape(*x);
                    let (c, p) = (s.c, s.plane());
                    let norm = T::one() / T::from_usize(c * p);
                    let xd = self.nodes[x.id].value.data();
                    let dx = grad_slot(grads, x.id, s.numel());
                    let mut sym = vec![T::zero(); c * c];
                    let mut dimg = vec![T::zero(); c * p];
                    for bi in 0..s.b {
                        let gb = &g[bi * c * c..(bi + 1) * c * c];
                        for i in 0..c {
                            for j in 0..c {
                                sym[i * c + j] = (gb[i * c + j] + gb[j * c + i]) * norm;
                            }
                        }
                        let img = &xd[bi * c * p..(bi + 1) * c * p];
                        kernels::matmul(&sym, img, &mut dimg, c, c, p);
                        let base = bi * c * p;
                        for i in 0..c * p {
                            dx[base + i] = dx[base + i] + dimg[i];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_vjp(
        &self,
        a: Var,
        b: Var,
        out_shape: Shape,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        need: &[bool],
        partials: impl Fn(T, T) -> (T, T),
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let n = out_shape.plane();
        let ad = self.nodes[a.id].value.data();
        let bd = self.nodes[b.id].value.data();
        for bi in 0..out_shape.b {
            for ci in 0..out_shape.c {
                let ap = (bi * sa.c + ci.min(sa.c - 1)) * n;
                let bp = (bi * sb.c + ci.min(sb.c - 1)) * n;
                let gp = (bi * out_shape.c + ci) * n;
                if need[a.id] {
                    let da = grad_slot(grads, a.id, sa.numel());
                    for i in 0..n {
                        let (pa, _) = partials(ad[ap + i], bd[bp + i]);
                        da[ap + i] = da[ap + i] + g[gp + i] * pa;
                    }
                }
                if need[b.id] {
                    let db = grad_slot(grads, b.id, sb.numel());
                    for i in 0..n {
                        let (_, pb) = partials(ad[ap + i], bd[bp + i]);
                        db[bp + i] = db[bp + i] + g[gp + i] * pb;
                    }
                }
            }
        }
    }
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut [T] {
    grads[id].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, contribution: &[T]) {
    let dst = grad_slot(grads, id, contribution.len());
    for (d, &c) in dst.iter_mut().zip(contribution) {
        *d = *d + c;
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Detach { .. } => Vec::new(),
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            if let Some(bv) = b {
                v.push(*bv);
            }
            v
        }
        Op::BoxSum { x, .. }
        | Op::ReflectPad { x, .. }
        | Op::NearestUpsample { x, .. }
        | Op::Relu { x }
        | Op::LeakyRelu { x, .. }
        | Op::Tanh { x }
        | Op::Sigmoid { x }
        | Op::Softplus { x }
        | Op::Abs { x }
        | Op::Sqrt { x }
        | Op::InstanceNorm { x, .. }
        | Op::ScaleShift { x, .. }
        | Op::MeanAll { x }
        | Op::SumAll { x }
        | Op::Gram { x } => vec![*x],
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::ConcatCh { xs } => xs.clone(),
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
