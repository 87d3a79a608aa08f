//! Dynamic reverse-mode tape.
//!
//! Each forward call appends a node holding its output and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so walking the
//! tape backwards visits every node after all of its consumers.

use super::conv::{self, ConvSpec};
use super::ops;
use super::{check_finite, Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node sources its statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode {
    /// Batch statistics; running statistics move by `momentum`.
    Train { momentum: f64 },
    /// Running statistics.
    Eval,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    Relu6(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Powf(Var, f64),
    AddScalar(Var),
    MulScalar(Var, T),
    Add(Var, Var),
    Mul(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Upsample2x(Var),
    L2NormSpatial(Var),
    MeanChannels(Var),
    SumAll(Var),
    MeanAll(Var),
    Concat(Var, Var),
    /// Channel `c` comes from `b` when `take_b[c]`, else from `a`.
    ChannelMix {
        a: Var,
        b: Var,
        take_b: Vec<bool>,
    },
    BceWithLogits {
        z: Var,
        labels: Vec<T>,
    },
    Consumed,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Owns every intermediate value of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    consumed: bool,
    macs: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        super::tune_allocator();
        Graph {
            nodes: Vec::new(),
            record: true,
            consumed: false,
            macs: 0,
        }
    }

    /// A graph that never tracks gradients (inference).
    pub fn no_grad() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed so far, under the profiler's
    /// conventions.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Registers an input. Gradients are tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = self.record && t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a leaf's tensor (with its gradient) out of the graph.
    pub fn take_leaf(&mut self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(Shape::new(0, shape.c, 0, 0)))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, op_name: &'static str, shape: Shape, data: Vec<T>, op: Op<T>, inputs: &[Var], macs: u64) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = self.needs(inputs);
        let value = Tensor::from_vec(shape, data)?;
        self.macs += macs;
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        let data: Vec<T> = xv.data().iter().map(|&v| f(v)).collect();
        self.push(name, shape, data, op, &[x], shape.numel() as u64)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let out_shape = spec.output_shape(xs)?;
        let ws = self.shape(w);
        if ws != spec.weight_shape() {
            return Err(Error::shape("conv2d weight", spec.weight_shape(), ws));
        }
        if spec.has_bias != b.is_some() {
            return Err(Error::InvalidSpec("bias presence disagrees with spec".into()));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != spec.out_channels {
                return Err(Error::shape("conv2d bias", Shape::channels(spec.out_channels), bs));
            }
        }
        let mut out = vec![T::zero(); out_shape.numel()];
        conv::forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            b.map(|b| self.nodes[b.0].value.data()),
            spec,
            &mut out,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let macs = spec.macs(out_shape);
        self.push("conv2d", out_shape, out, Op::Conv { x, w, b, spec: *spec }, &inputs, macs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        let six = T::from_f64(6.0);
        self.unary("relu6", x, |v| v.max(T::zero()).min(six), Op::Relu6(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let pt = T::from_f64(p);
        self.unary("powf", x, |v| v.powf(pt), Op::Powf(x, p))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let kt = T::from_f64(k);
        self.unary("add_scalar", x, |v| v + kt, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let kt = T::from_f64(k);
        self.unary("mul_scalar", x, |v| v * kt, Op::MulScalar(x, kt))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = ops::broadcast_shape(sa, sb).ok_or(Error::Broadcast { op: name, lhs: sa, rhs: sb })?;
        let data = ops::binary(self.value(a).data(), sa, self.value(b).data(), sb, out, f);
        self.push(name, out, data, op, &[a, b], out.numel() as u64)
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Broadcasting product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a − b`, built from the primitives.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.mul_scalar(b, -1.0)?;
        self.add(a, nb)
    }

    /// Per-channel batch normalization with affine `gamma`, `beta` of shape
    /// `(1, C, 1, 1)`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: BatchNormMode,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs.c;
        for (name, v) in [("gamma", self.shape(gamma)), ("beta", self.shape(beta))] {
            if v.numel() != c {
                return Err(Error::shape(if name == "gamma" { "batch_norm gamma" } else { "batch_norm beta" }, Shape::channels(c), v));
            }
        }
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::shape("batch_norm running stats", Shape::channels(c), running_mean.shape()));
        }
        let plane = xs.plane();
        let count = xs.n * plane;
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            BatchNormMode::Train { momentum } => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for n in 0..xs.n {
                    for ch in 0..c {
                        let p = &xd[(n * c + ch) * plane..][..plane];
                        mean[ch] += p.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for n in 0..xs.n {
                    for ch in 0..c {
                        let p = &xd[(n * c + ch) * plane..][..plane];
                        var[ch] += p.iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
                let rm = running_mean.data_mut();
                for ch in 0..c {
                    rm[ch] = T::from_f64((1.0 - momentum) * rm[ch].as_f64() + momentum * mean[ch]);
                }
                let rv = running_var.data_mut();
                for ch in 0..c {
                    rv[ch] = T::from_f64((1.0 - momentum) * rv[ch].as_f64() + momentum * var[ch] * unbias);
                }
                (mean, var)
            }
            BatchNormMode::Eval => (
                running_mean.data().iter().map(|v| v.as_f64()).collect(),
                running_var.data().iter().map(|v| v.as_f64()).collect(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.numel()];
        let mut out = vec![T::zero(); xs.numel()];
        let planes = xhat.chunks_mut(plane.max(1)).zip(out.chunks_mut(plane.max(1))).zip(xd.chunks(plane.max(1)));
        for (i, ((hp, op), xp)) in planes.enumerate() {
            let ch = i % c;
            let (m, is, gc, bc) = (T::from_f64(mean[ch]), inv_std[ch], g[ch], bt[ch]);
            for ((h, o), &v) in hp.iter_mut().zip(op.iter_mut()).zip(xp) {
                *h = (v - m) * is;
                *o = gc * *h + bc;
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: matches!(mode, BatchNormMode::Train { .. }),
        };
        self.push("batch_norm", xs, out, op, &[x, gamma, beta], xs.numel() as u64)
    }

    /// Half-pixel-center bilinear upsampling by 2 in both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h == 0 || xs.w == 0 {
            return Err(Error::shape("upsample2x", "non-empty spatial extent", xs));
        }
        let out = Shape::new(xs.n, xs.c, 2 * xs.h, 2 * xs.w);
        let data = ops::upsample2x_forward(self.value(x).data(), xs);
        self.push("upsample2x", out, data, Op::Upsample2x(x), &[x], 4 * out.numel() as u64)
    }

    /// `sqrt(Σ_{h,w} x² + eps)` per `(n, c)`, shape `(N, C, 1, 1)`.
    pub fn l2_norm_spatial(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        let e = T::from_f64(eps);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(xs.plane().max(1))
            .map(|p| (p.iter().map(|&v| v * v).sum::<T>() + e).sqrt())
            .collect();
        let out = Shape::new(xs.n, xs.c, 1, 1);
        self.push("l2_norm_spatial", out, data, Op::L2NormSpatial(x), &[x], xs.numel() as u64)
    }

    /// Mean over the channel axis, keeping it as size 1.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let plane = xs.plane();
        let xd = self.value(x).data();
        let inv = T::from_f64(1.0 / xs.c as f64);
        let mut out = vec![T::zero(); xs.n * plane];
        for n in 0..xs.n {
            let dst = &mut out[n * plane..(n + 1) * plane];
            for c in 0..xs.c {
                let src = &xd[(n * xs.c + c) * plane..][..plane];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let shape = Shape::new(xs.n, 1, xs.h, xs.w);
        self.push("mean_channels", shape, out, Op::MeanChannels(x), &[x], xs.numel() as u64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s: T = xv.data().iter().copied().sum();
        let n = xv.numel() as u64;
        self.push("sum", Shape::scalar(), vec![s], Op::SumAll(x), &[x], n)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        let s: T = xv.data().iter().copied().sum::<T>() / T::from_f64(n as f64);
        self.push("mean", Shape::scalar(), vec![s], Op::MeanAll(x), &[x], n as u64)
    }

    /// Concatenation along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut data = Vec::with_capacity(out.numel());
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa.n {
            data.extend_from_slice(&ad[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&bd[n * pb..(n + 1) * pb]);
        }
        self.push("concat_channels", out, data, Op::Concat(a, b), &[a, b], 0)
    }

    /// Selects each channel from `b` where `take_b` is set, else from `a`.
    pub fn channel_mix(&mut self, a: Var, b: Var, take_b: &[bool]) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("channel_mix", sa, sb));
        }
        if take_b.len() != sa.c {
            return Err(Error::shape("channel_mix mask", sa.c, take_b.len()));
        }
        let plane = sa.plane();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(sa.numel());
        for n in 0..sa.n {
            for (c, &tb) in take_b.iter().enumerate() {
                let off = (n * sa.c + c) * plane;
                let src = if tb { bd } else { ad };
                data.extend_from_slice(&src[off..off + plane]);
            }
        }
        let op = Op::ChannelMix {
            a,
            b,
            take_b: take_b.to_vec(),
        };
        self.push("channel_mix", sa, data, op, &[a, b], 0)
    }

    /// Mean binary cross-entropy on logits, in the stable form
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, labels: &Tensor<T>) -> Result<Var> {
        let zs = self.shape(z);
        if labels.shape() != zs {
            return Err(Error::shape("bce_with_logits", zs, labels.shape()));
        }
        if let Some(bad) = labels.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::NonBinary(bad.to_string()));
        }
        let n = zs.numel();
        let total: T = self
            .value(z)
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&zv, &y)| bce_term(zv, y))
            .sum();
        let loss = total / T::from_f64(n as f64);
        let op = Op::BceWithLogits {
            z,
            labels: labels.data().to_vec(),
        };
        self.push("bce_with_logits", Shape::scalar(), vec![loss], op, &[z], n as u64)
    }

    /// Populates gradients on every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called on a consumed tape".into()));
        }
        if !self.record {
            return Err(Error::Graph("backward on a no-grad graph".into()));
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar loss, got {ls}")));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Consumed);
            self.propagate(i, op, &g, &mut grads)?;
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf | Op::Consumed) {
                n.op = Op::Consumed;
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        if let Op::Leaf = op {
            return self.nodes[i].value.accumulate_grad(g);
        }
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        // Gradient buffers are moved out of `grads` while being written and
        // put back afterwards, so two inputs never borrow the slice at once.
        let take = |grads: &mut [Option<Vec<T>>], v: Var| -> Vec<T> {
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.numel()])
        };
        let take_if = |grads: &mut [Option<Vec<T>>], v: Var| want(v).then(|| take(grads, v));
        fn put<T>(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
            if buf.is_some() {
                grads[v.0] = buf;
            }
        }
        let out = &nodes[i].value;
        match op {
            Op::Leaf | Op::Consumed => {}
            Op::Conv { x, w, b, spec } => {
                let mut dx = take_if(grads, x);
                let mut dw = take_if(grads, w);
                let mut db = b.and_then(|b| take_if(grads, b));
                conv::backward(
                    nodes[x.0].value.data(),
                    nodes[x.0].value.shape(),
                    nodes[w.0].value.data(),
                    &spec,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(grads, x, dx);
                put(grads, w, dw);
                if let Some(b) = b {
                    put(grads, b, db);
                }
            }
            Op::Relu(x) => {
                let xd = nodes[x.0].value.data();
                let mut d = take(grads, x);
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                    *d += if xv > T::zero() { gv } else { T::zero() };
                }
                put(grads, x, Some(d));
            }
            Op::Relu6(x) => {
                let xd = nodes[x.0].value.data();
                let six = T::from_f64(6.0);
                let mut d = take(grads, x);
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                    *d += if xv > T::zero() && xv < six { gv } else { T::zero() };
                }
                put(grads, x, Some(d));
            }
            Op::Tanh(x) => {
                let mut d = take(grads, x);
                for ((d, &gv), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (T::one() - y * y);
                }
                put(grads, x, Some(d));
            }
            Op::Sigmoid(x) => {
                let mut d = take(grads, x);
                for ((d, &gv), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (T::one() - y);
                }
                put(grads, x, Some(d));
            }
            Op::Abs(x) => {
                let xd = nodes[x.0].value.data();
                let mut d = take(grads, x);
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                    if xv > T::zero() {
                        *d += gv;
                    } else if xv < T::zero() {
                        *d -= gv;
                    }
                }
                put(grads, x, Some(d));
            }
            Op::Powf(x, p) => {
                let xd = nodes[x.0].value.data();
                let pt = T::from_f64(p);
                let pm1 = T::from_f64(p - 1.0);
                let mut d = take(grads, x);
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                    *d += gv * pt * xv.powf(pm1);
                }
                put(grads, x, Some(d));
            }
            Op::AddScalar(x) => {
                let mut d = take(grads, x);
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                put(grads, x, Some(d));
            }
            Op::MulScalar(x, k) => {
                let mut d = take(grads, x);
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * k);
                put(grads, x, Some(d));
            }
            Op::Add(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                if a == b {
                    let mut d = take(grads, a);
                    ops::add_backward(g, sa, sb, out.shape(), Some(&mut d), None);
                    ops::add_backward(g, sa, sb, out.shape(), None, Some(&mut d));
                    put(grads, a, Some(d));
                } else {
                    let mut da = take_if(grads, a);
                    let mut db = take_if(grads, b);
                    ops::add_backward(g, sa, sb, out.shape(), da.as_deref_mut(), db.as_deref_mut());
                    put(grads, a, da);
                    put(grads, b, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (va.shape(), vb.shape());
                let os = out.shape();
                if a == b {
                    let mut d = take(grads, a);
                    ops::mul_backward(g, va.data(), sa, vb.data(), sb, os, Some(&mut d), None);
                    ops::mul_backward(g, va.data(), sa, vb.data(), sb, os, None, Some(&mut d));
                    put(grads, a, Some(d));
                } else {
                    let mut da = take_if(grads, a);
                    let mut db = take_if(grads, b);
                    ops::mul_backward(
                        g,
                        va.data(),
                        sa,
                        vb.data(),
                        sb,
                        os,
                        da.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    put(grads, a, da);
                    put(grads, b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = nodes[x.0].value.shape();
                let c = xs.c;
                let plane = xs.plane();
                let gd = nodes[gamma.0].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gp, hp)) in g.chunks(plane.max(1)).zip(xhat.chunks(plane.max(1))).enumerate() {
                    let ch = i % c;
                    sum_g[ch] += gp.iter().copied().sum::<T>();
                    sum_gx[ch] += gp.iter().zip(hp).fold(T::zero(), |a, (&u, &v)| a + u * v);
                }
                if let Some(mut d) = take_if(grads, gamma) {
                    d.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                    put(grads, gamma, Some(d));
                }
                if let Some(mut d) = take_if(grads, beta) {
                    d.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                    put(grads, beta, Some(d));
                }
                if let Some(mut d) = take_if(grads, x) {
                    let m = T::from_f64((xs.n * plane) as f64);
                    let planes = d.chunks_mut(plane.max(1)).zip(g.chunks(plane.max(1))).zip(xhat.chunks(plane.max(1)));
                    for (i, ((dp, gp), hp)) in planes.enumerate() {
                        let ch = i % c;
                        let scale = gd[ch] * inv_std[ch];
                        if batch_stats {
                            let mg = sum_g[ch] / m;
                            let mgx = sum_gx[ch] / m;
                            for ((d, &gv), &h) in dp.iter_mut().zip(gp).zip(hp) {
                                *d += scale * (gv - mg - h * mgx);
                            }
                        } else {
                            dp.iter_mut().zip(gp).for_each(|(d, &gv)| *d += scale * gv);
                        }
                    }
                    put(grads, x, Some(d));
                }
            }
            Op::Upsample2x(x) => {
                let mut d = take(grads, x);
                ops::upsample2x_backward(g, nodes[x.0].value.shape(), &mut d);
                put(grads, x, Some(d));
            }
            Op::L2NormSpatial(x) => {
                let xv = &nodes[x.0].value;
                let plane = xv.shape().plane().max(1);
                let mut d = take(grads, x);
                for (k, ((dp, xp), &norm)) in d
                    .chunks_mut(plane)
                    .zip(xv.data().chunks(plane))
                    .zip(out.data())
                    .enumerate()
                {
                    // zero norm (eps = 0, all-zero channel): subgradient 0
                    if norm > T::zero() {
                        let s = g[k] / norm;
                        dp.iter_mut().zip(xp).for_each(|(d, &v)| *d += s * v);
                    }
                }
                put(grads, x, Some(d));
            }
            Op::MeanChannels(x) => {
                let xs = nodes[x.0].value.shape();
                let plane = xs.plane();
                let inv = T::from_f64(1.0 / xs.c as f64);
                let mut d = take(grads, x);
                for n in 0..xs.n {
                    let gp = &g[n * plane..(n + 1) * plane];
                    for c in 0..xs.c {
                        let dp = &mut d[(n * xs.c + c) * plane..][..plane];
                        dp.iter_mut().zip(gp).for_each(|(d, &v)| *d += v * inv);
                    }
                }
                put(grads, x, Some(d));
            }
            Op::SumAll(x) => {
                let gv = g[0];
                let mut d = take(grads, x);
                d.iter_mut().for_each(|d| *d += gv);
                put(grads, x, Some(d));
            }
            Op::MeanAll(x) => {
                let len = nodes[x.0].value.numel();
                let gv = g[0] / T::from_f64(len as f64);
                let mut d = take(grads, x);
                d.iter_mut().for_each(|d| *d += gv);
                put(grads, x, Some(d));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
                for (v, off, len) in [(a, 0, pa), (b, pa, pb)] {
                    let Some(mut d) = take_if(grads, v) else { continue };
                    for n in 0..sa.n {
                        let src = &g[n * (pa + pb) + off..][..len];
                        let dst = &mut d[n * len..(n + 1) * len];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                    put(grads, v, Some(d));
                }
            }
            Op::ChannelMix { a, b, take_b } => {
                let s = out.shape();
                let plane = s.plane();
                for (v, from_b) in [(a, false), (b, true)] {
                    let Some(mut d) = take_if(grads, v) else { continue };
                    for n in 0..s.n {
                        for (c, &tb) in take_b.iter().enumerate() {
                            if tb != from_b {
                                continue;
                            }
                            let off = (n * s.c + c) * plane;
                            let dst = &mut d[off..off + plane];
                            dst.iter_mut().zip(&g[off..off + plane]).for_each(|(d, &v)| *d += v);
                        }
                    }
                    put(grads, v, Some(d));
                }
            }
            Op::BceWithLogits { z, labels } => {
                let zd = nodes[z.0].value.data();
                let scale = g[0] / T::from_f64(zd.len() as f64);
                let mut d = take(grads, z);
                for ((d, &zv), &y) in d.iter_mut().zip(zd).zip(&labels) {
                    *d += scale * (sigmoid(zv) - y);
                }
                put(grads, z, Some(d));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn bce_term<T: Element>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}
