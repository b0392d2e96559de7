use super::kernels::{self, ConvGeom, PoolGeom};
use super::{gemm, Element, MatRef, Padding, PoolKind, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, f: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gsize: usize, mean: Vec<E>, rstd: Vec<E> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Modulate { x: Var, scale: Var, shift: Var },
    Pool { x: Var, geom: PoolGeom, kind: PoolKind, planes: usize, argmax: Vec<usize> },
    Silu { x: Var },
    Tanh { x: Var },
    Softmax { x: Var },
    Exp { x: Var },
    Sqrt { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: E },
    AddScalar { x: Var },
    Bmm { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    L2Normalize { x: Var, eps: E, norms: Vec<E>, d: usize, l: usize },
    Reshape { x: Var },
    ConcatChannels { a: Var, b: Var, ca: usize, cb: usize },
    SliceChannels { x: Var, start: usize, len: usize },
    Upsample2x { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumPerSample { x: Var },
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Operation tape. Nodes are appended in execution order, so reverse
/// insertion order is a valid topological order for the backward pass.
#[derive(Debug, Default)]
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn config(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Config { op, msg: msg.into() }
}

#[inline]
fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a tensor as a leaf. Its `requires_grad` flag decides whether
    /// [`Graph::backward`] populates a gradient for it.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Take a leaf tensor (value and gradient) back out of the graph.
    pub fn take_leaf(&mut self, v: Var) -> Tensor<E> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(E::zero()))
    }

    /// Copy a value into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone().with_requires_grad(false);
        self.constant(t)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v)
            .dims4()
            .map_err(|_| config(op, format!("expected rank-4 input, got {:?}", self.shape(v))))
    }

    /// Cross-correlation with zero padding. `weight` is `[f, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (n, c, h, w) = self.dims4("conv2d", x)?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(mismatch("conv2d", self.shape(x), &ws));
        }
        let (f, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(mismatch("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(c, h, w, k, stride, padding).ok_or_else(|| {
            config("conv2d", format!("kernel {k} stride {stride} {padding:?} invalid for {h}x{w}"))
        })?;
        let mut out = vec![E::zero(); n * f * geom.ho * geom.wo];
        kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(weight).data(),
            f,
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(&[n, f, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("conv2d", t, Op::Conv2d { x, w: weight, b: bias, geom, f }, &inputs)
    }

    /// Dense layer: `x [n, in]`, `weight [out, in]`, `bias [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (n, o) = (xs[0], ws[0]);
        let mut out = vec![E::zero(); n * o];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            if bd.len() != o {
                return Err(mismatch("linear bias", &ws, self.shape(b)));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            MatRef::rm(self.value(x).data(), n, xs[1]),
            MatRef::rm(self.value(weight).data(), o, ws[1]).t(),
            E::one(),
            &mut out,
        );
        let t = Tensor::new(&[n, o], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("linear", t, Op::Linear { x, w: weight, b: bias }, &inputs)
    }

    /// Normalize each (sample, channel-group) to zero mean and unit variance.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: E) -> Result<Var> {
        let (n, c, h, w) = self.dims4("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(config("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if eps <= E::zero() {
            return Err(config("group_norm", "eps must be positive"));
        }
        let mut out = vec![E::zero(); n * c * h * w];
        let (mean, rstd) =
            kernels::group_norm_forward(self.value(x).data(), n, c, h * w, groups, eps, &mut out);
        let t = Tensor::new(&[n, c, h, w], out)?;
        let gsize = c / groups * h * w;
        self.push("group_norm", t, Op::GroupNorm { x, gsize, mean, rstd }, &[x])
    }

    /// Per-channel `x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("channel_affine", x)?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(mismatch("channel_affine", self.shape(x), self.shape(scale)));
        }
        let (xd, sd, bd) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let hw = h * w;
        let out: Vec<E> = (0..n * c * hw)
            .map(|i| {
                let ch = (i / hw) % c;
                xd[i] * sd[ch] + bd[ch]
            })
            .collect();
        let t = Tensor::new(&[n, c, h, w], out)?;
        self.push("channel_affine", t, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// Per-sample, per-channel `x * scale[n, c] + shift[n, c]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("modulate", x)?;
        if self.shape(scale) != [n, c] || self.shape(shift) != [n, c] {
            return Err(mismatch("modulate", self.shape(x), self.shape(scale)));
        }
        let (xd, sd, bd) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let hw = h * w;
        let out: Vec<E> = (0..n * c * hw)
            .map(|i| {
                let nc = i / hw;
                xd[i] * sd[nc] + bd[nc]
            })
            .collect();
        let t = Tensor::new(&[n, c, h, w], out)?;
        self.push("modulate", t, Op::Modulate { x, scale, shift }, &[x, scale, shift])
    }

    /// Window mean or maximum over each plane; `Same` padding replicates edges.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize, padding: Padding) -> Result<Var> {
        let (n, c, h, w) = self.dims4("pool2d", x)?;
        let geom = PoolGeom::new(h, w, kernel, stride, padding).ok_or_else(|| {
            config("pool2d", format!("kernel {kernel} stride {stride} {padding:?} invalid for {h}x{w}"))
        })?;
        let planes = n * c;
        let mut out = vec![E::zero(); planes * geom.ho * geom.wo];
        let mut argmax = Vec::new();
        kernels::pool2d_forward(
            self.value(x).data(),
            planes,
            &geom,
            kind,
            &mut out,
            (kind == PoolKind::Max).then_some(&mut argmax),
        );
        let t = Tensor::new(&[n, c, geom.ho, geom.wo], out)?;
        self.push("pool2d", t, Op::Pool { x, geom, kind, planes, argmax }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", t, Op::Silu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.tanh());
        self.push("tanh", t, Op::Tanh { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let last = *src.shape().last().expect("non-empty shape");
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(last) {
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut s = E::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let t = Tensor::new(src.shape(), out)?;
        self.push("softmax", t, Op::Softmax { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.exp());
        self.push("exp", t, Op::Exp { x }, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", t, Op::Sqrt { x }, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |p, q| p + q)?;
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |p, q| p - q)?;
        self.push("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |p, q| p * q)?;
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: E) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push("add_scalar", t, Op::AddScalar { x }, &[x])
    }

    /// Batched matrix product `[b, m, k] x [b, k, n] -> [b, m, n]`. The
    /// transpose flags mean the operand is stored as `[b, k, m]` / `[b, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let batch = sa[0];
        let mut out = vec![E::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let av = view(&ad[i * m * k..(i + 1) * m * k], m, k, ta);
            let bv = view(&bd[i * k * n..(i + 1) * k * n], k, n, tb);
            gemm(av, bv, E::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        self.push("bmm", t, Op::Bmm { a, b, ta, tb, m, k, n }, &[a, b])
    }

    /// Normalize `[b, d, l]` along `d`: `x / (|x| + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: E) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(config("l2_normalize", format!("expected rank-3 input, got {s:?}")));
        }
        let (b, d, l) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut norms = vec![E::zero(); b * l];
        for bi in 0..b {
            for di in 0..d {
                for li in 0..l {
                    let v = xd[(bi * d + di) * l + li];
                    norms[bi * l + li] = norms[bi * l + li] + v * v;
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let out: Vec<E> = (0..b * d * l)
            .map(|i| {
                let (bi, li) = (i / (d * l), i % l);
                xd[i] / (norms[bi * l + li] + eps)
            })
            .collect();
        let t = Tensor::new(&s, out)?;
        self.push("l2_normalize", t, Op::L2Normalize { x, eps, norms, d, l }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        self.push("reshape", t, Op::Reshape { x }, &[x])
    }

    /// Concatenate two rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.dims4("concat", a)?;
        let (nb, cb, hb, wb) = self.dims4("concat", b)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(mismatch("concat_channels", self.shape(a), self.shape(b)));
        }
        let hw = h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&ad[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bd[s * cb * hw..(s + 1) * cb * hw]);
        }
        let t = Tensor::new(&[n, ca + cb, h, w], out)?;
        self.push("concat_channels", t, Op::ConcatChannels { a, b, ca, cb }, &[a, b])
    }

    /// Channels `[start, start + len)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4("slice_channels", x)?;
        if len == 0 || start + len > c {
            return Err(config("slice_channels", format!("{start}+{len} outside {c} channels")));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&xd[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let t = Tensor::new(&[n, len, h, w], out)?;
        self.push("slice_channels", t, Op::SliceChannels { x, start, len }, &[x])
    }

    /// Nearest-neighbour upsampling by two.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("upsample2x", x)?;
        let xd = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![E::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[p * h2 * w2 + y * w2 + xx] = xd[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], out)?;
        self.push("upsample2x", t, Op::Upsample2x { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push("sum", t, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.data().iter().copied().sum::<E>() / E::lit(v.numel() as f64));
        self.push("mean", t, Op::Mean { x }, &[x])
    }

    /// Sum over every axis but the first: `[n, ...] -> [n]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape()[0];
        let per = v.numel() / n;
        let out: Vec<E> = v.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        let t = Tensor::new(&[n], out)?;
        self.push("sum_per_sample", t, Op::SumPerSample { x }, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added to the
    /// `grad` buffer of every leaf with `requires_grad`, so calling this twice
    /// without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (v, d) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn zeros_like(&self, v: Var) -> Vec<E> {
        vec![E::zero(); self.value(v).numel()]
    }

    /// Vector-Jacobian products of node `i` for its inputs.
    fn node_backward(&self, i: usize, g: &[E]) -> Vec<(Var, Vec<E>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, f } => {
                let n = self.value(*x).shape()[0];
                let mut dx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut dw = self.wants(*w).then(|| self.zeros_like(*w));
                let mut db = b.filter(|b| self.wants(*b)).map(|b| self.zeros_like(b));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    *f,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    res.push((*b, d));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, inp) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                let gm = MatRef::rm(g, n, o);
                if self.wants(*x) {
                    let mut d = self.zeros_like(*x);
                    gemm(gm, MatRef::rm(self.value(*w).data(), o, inp), E::zero(), &mut d);
                    res.push((*x, d));
                }
                if self.wants(*w) {
                    let mut d = self.zeros_like(*w);
                    gemm(gm.t(), MatRef::rm(self.value(*x).data(), n, inp), E::zero(), &mut d);
                    res.push((*w, d));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut d = vec![E::zero(); o];
                    for row in g.chunks(o) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    res.push((b, d));
                }
            }
            Op::GroupNorm { x, gsize, mean, rstd } => {
                let mut d = self.zeros_like(*x);
                kernels::group_norm_backward(self.value(*x).data(), *gsize, mean, rstd, g, &mut d);
                res.push((*x, d));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (_, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let hw = h * w;
                let (xd, sd) = (self.value(*x).data(), self.value(*scale).data());
                if self.wants(*x) {
                    res.push((*x, g.iter().enumerate().map(|(j, &v)| v * sd[(j / hw) % c]).collect()));
                }
                let mut ds = vec![E::zero(); c];
                let mut dsh = vec![E::zero(); c];
                for (j, &v) in g.iter().enumerate() {
                    let ch = (j / hw) % c;
                    ds[ch] = ds[ch] + v * xd[j];
                    dsh[ch] = dsh[ch] + v;
                }
                res.push((*scale, ds));
                res.push((*shift, dsh));
            }
            Op::Modulate { x, scale, shift } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let hw = h * w;
                let (xd, sd) = (self.value(*x).data(), self.value(*scale).data());
                if self.wants(*x) {
                    res.push((*x, g.iter().enumerate().map(|(j, &v)| v * sd[j / hw]).collect()));
                }
                let mut ds = vec![E::zero(); n * c];
                let mut dsh = vec![E::zero(); n * c];
                for (j, &v) in g.iter().enumerate() {
                    ds[j / hw] = ds[j / hw] + v * xd[j];
                    dsh[j / hw] = dsh[j / hw] + v;
                }
                res.push((*scale, ds));
                res.push((*shift, dsh));
            }
            Op::Pool { x, geom, kind, planes, argmax } => {
                let mut d = self.zeros_like(*x);
                kernels::pool2d_backward(*planes, geom, *kind, argmax, g, &mut d);
                res.push((*x, d));
            }
            Op::Silu { x } => {
                let xd = self.value(*x).data();
                let d = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (E::one() + v * (E::one() - s))
                    })
                    .collect();
                res.push((*x, d));
            }
            Op::Softmax { x } => {
                let last = *node.value.shape().last().expect("shape");
                let mut d = vec![E::zero(); out.len()];
                for ((yr, gr), dr) in out.chunks(last).zip(g.chunks(last)).zip(d.chunks_mut(last)) {
                    let dot: E = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for ((o, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (gv - dot);
                    }
                }
                res.push((*x, d));
            }
            Op::Tanh { x } => {
                res.push((*x, out.iter().zip(g).map(|(&y, &gv)| gv * (E::one() - y * y)).collect()));
            }
            Op::Exp { x } => {
                res.push((*x, out.iter().zip(g).map(|(&y, &gv)| y * gv).collect()));
            }
            Op::Sqrt { x } => {
                let two = E::lit(2.0);
                res.push((*x, out.iter().zip(g).map(|(&y, &gv)| gv / (two * y)).collect()));
            }
            Op::Add { a, b } => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                res.push((*a, g.iter().zip(bd).map(|(&gv, &q)| gv * q).collect()));
                res.push((*b, g.iter().zip(ad).map(|(&gv, &p)| gv * p).collect()));
            }
            Op::Scale { x, c } => res.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::AddScalar { x } | Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::Bmm { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let batch = node.value.shape()[0];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut d = vec![E::zero(); batch * m * k];
                    for i in 0..batch {
                        let gm = MatRef::rm(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bv = view(&bd[i * k * n..(i + 1) * k * n], k, n, *tb);
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // stored as [k, m]: d = b * g^T
                            gemm(bv, gm.t(), E::zero(), di);
                        } else {
                            gemm(gm, bv.t(), E::zero(), di);
                        }
                    }
                    res.push((*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![E::zero(); batch * k * n];
                    for i in 0..batch {
                        let gm = MatRef::rm(&g[i * m * n..(i + 1) * m * n], m, n);
                        let av = view(&ad[i * m * k..(i + 1) * m * k], m, k, *ta);
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // stored as [n, k]: d = g^T * a
                            gemm(gm.t(), av, E::zero(), di);
                        } else {
                            gemm(av.t(), gm, E::zero(), di);
                        }
                    }
                    res.push((*b, d));
                }
            }
            Op::L2Normalize { x, eps, norms, d, l } => {
                let (d, l) = (*d, *l);
                let xd = self.value(*x).data();
                let b = xd.len() / (d * l);
                let mut dx = vec![E::zero(); xd.len()];
                for bi in 0..b {
                    for li in 0..l {
                        let r = norms[bi * l + li];
                        let denom = r + *eps;
                        let idx = |di: usize| (bi * d + di) * l + li;
                        let dot: E = (0..d).map(|di| g[idx(di)] * xd[idx(di)]).sum();
                        let coef = if r > E::zero() { dot / (r * denom * denom) } else { E::zero() };
                        for di in 0..d {
                            dx[idx(di)] = g[idx(di)] / denom - xd[idx(di)] * coef;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::ConcatChannels { a, b, ca, cb } => {
                let (n, _, h, w) = node.value.dims4().expect("rank 4");
                let hw = h * w;
                let (mut da, mut db) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&g[base..base + ca * hw]);
                    db.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                res.push((*a, da));
                res.push((*b, db));
            }
            Op::SliceChannels { x, start, len } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let hw = h * w;
                let mut d = vec![E::zero(); n * c * hw];
                for s in 0..n {
                    d[(s * c + start) * hw..(s * c + start + len) * hw]
                        .copy_from_slice(&g[s * len * hw..(s + 1) * len * hw]);
                }
                res.push((*x, d));
            }
            Op::Upsample2x { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let w2 = 2 * w;
                let mut d = vec![E::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            let s = p * h * w + (y / 2) * w + xx / 2;
                            d[s] = d[s] + g[p * 4 * h * w + y * w2 + xx];
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::Sum { x } => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / E::lit(n as f64); n]));
            }
            Op::SumPerSample { x } => {
                let v = self.value(*x);
                let per = v.numel() / v.shape()[0];
                res.push((*x, (0..v.numel()).map(|j| g[j / per]).collect()));
            }
        }
        res
    }
}

fn view<E>(data: &[E], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, E> {
    if transposed {
        MatRef::rm(data, cols, rows).t()
    } else {
        MatRef::rm(data, rows, cols)
    }
}
