//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends one node holding its output value, the ids of
//! its inputs and whatever activations the backward rule needs. Nodes are
//! appended after their inputs, so the node vector is already in
//! topological order and [`Tape::backward`] walks it once, back to front.
//!
//! Leaves carry a `requires_grad` flag. Gradient flags propagate forward,
//! and the backward pass skips any node (and any input edge) whose flag is
//! off; frozen weights therefore never get a gradient buffer.

use super::tensor::{split_at_axis, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
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
    /// Right operand's shape is a suffix of the left operand's shape.
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    /// `x[.., K] · w[N, K]ᵀ`
    MatMulT(Var, Var),
    /// `a[B, M, K] · b[B, K, N]`
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    /// Output value is the normalised input; `rstd` holds 1/σ per row.
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Tanh(Var),
    Mean { x: Var, axis: usize },
    Sum(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn suffix_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a + b` with `b` broadcast over the leading dimensions of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_shape("add_bcast", a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = self.nodes[b.0].value.data();
        let m = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % m])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddBcast(a, b), ng))
    }

    /// `a ⊙ b` with `b` broadcast over the leading dimensions of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_shape("mul_bcast", a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = self.nodes[b.0].value.data();
        let m = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb[i % m])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MulBcast(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    /// Linear map `x · wᵀ` with `w` stored as `[out, in]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != k {
            return Err(Error::Shape {
                op: "matmul_t",
                left: sx,
                right: sw,
            });
        }
        let n = sw[0];
        let m = self.nodes[x.0].value.len() / k;
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(xr, &wd[j * k..(j + 1) * k]);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMulT(x, w), ng))
    }

    /// Batched matrix product `[B, M, K] · [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm",
                left: sa,
                right: sb,
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); bt * m * n];
        for p in 0..bt {
            let ao = p * m * k;
            let bo = p * k * n;
            let oo = p * m * n;
            for i in 0..m {
                let row = &mut out[oo + i * n..oo + (i + 1) * n];
                for kk in 0..k {
                    let av = ad[ao + i * k + kk];
                    let br = &bd[bo + kk * n..bo + (kk + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(br) {
                        *o += av * bv;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![bt, m, n], out)?, Op::Bmm(a, b), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                left: sx,
                right: perm.to_vec(),
            });
        }
        let out = permute_tensor(&self.nodes[x.0].value, perm);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let out = softmax_rows(vx);
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let n = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let vx = &self.nodes[x.0].value;
        let n = vx.last_dim();
        let nf = T::of(n as f64);
        let mut data = vx.data().to_vec();
        let mut rstd = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        self.map(x, Op::Gelu(x), |v| {
            let t = (c * (v + a * v * v * v)).tanh();
            half * v * (T::one() + t)
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Mean over `axis`, which is removed from the shape (a `[1]` result
    /// stands in for a rank-0 tensor).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Shape {
                op: "mean",
                left: sx,
                right: vec![axis],
            });
        }
        let (outer, len, inner) = split_at_axis(&sx, axis);
        let xd = self.nodes[x.0].value.data();
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut shape = sx;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { x, axis }, ng))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::Shape {
                op: "slice",
                left: sx,
                right: vec![axis, start, len],
            });
        }
        let (outer, full, inner) = split_at_axis(&sx, axis);
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&xd[from..from + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                left: first,
                right: vec![axis],
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.nodes[v.0].value.data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(loss).to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *b, || gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *b, || gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                self.acc(grads, *b, || gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::AddBcast(a, b) => {
                self.acc(grads, *a, || gd.to_vec());
                let m = self.value(*b).len();
                self.acc(grads, *b, || {
                    let mut out = vec![T::zero(); m];
                    for (i, &gv) in gd.iter().enumerate() {
                        out[i % m] += gv;
                    }
                    out
                });
            }
            Op::MulBcast(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let m = vb.len();
                self.acc(grads, *a, || {
                    gd.iter().enumerate().map(|(i, &gv)| gv * vb[i % m]).collect()
                });
                self.acc(grads, *b, || {
                    let mut out = vec![T::zero(); m];
                    for (i, (&gv, &x)) in gd.iter().zip(va).enumerate() {
                        out[i % m] += gv * x;
                    }
                    out
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, || gd.iter().map(|&v| v * *s).collect()),
            Op::MatMulT(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let k = xv.last_dim();
                let n = wv.shape()[0];
                let m = xv.len() / k;
                let (xd, wd) = (xv.data(), wv.data());
                self.acc(grads, *x, || {
                    let mut gx = vec![T::zero(); m * k];
                    for i in 0..m {
                        let row = &mut gx[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            for (r, &wv) in row.iter_mut().zip(&wd[j * k..(j + 1) * k]) {
                                *r += gij * wv;
                            }
                        }
                    }
                    gx
                });
                self.acc(grads, *w, || {
                    let mut gw = vec![T::zero(); n * k];
                    for i in 0..m {
                        let xr = &xd[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            for (r, &xv) in gw[j * k..(j + 1) * k].iter_mut().zip(xr) {
                                *r += gij * xv;
                            }
                        }
                    }
                    gw
                });
            }
            Op::Bmm(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                self.acc(grads, *a, || {
                    let mut ga = vec![T::zero(); bt * m * k];
                    for p in 0..bt {
                        for i in 0..m {
                            let grow = &gd[p * m * n + i * n..p * m * n + (i + 1) * n];
                            for kk in 0..k {
                                let brow = &bd[p * k * n + kk * n..p * k * n + (kk + 1) * n];
                                ga[p * m * k + i * k + kk] = dot(grow, brow);
                            }
                        }
                    }
                    ga
                });
                self.acc(grads, *b, || {
                    let mut gb = vec![T::zero(); bt * k * n];
                    for p in 0..bt {
                        for i in 0..m {
                            let grow = &gd[p * m * n + i * n..p * m * n + (i + 1) * n];
                            for kk in 0..k {
                                let av = ad[p * m * k + i * k + kk];
                                let dst = &mut gb[p * k * n + kk * n..p * k * n + (kk + 1) * n];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    gb
                });
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *x, || permute_tensor(g, &inv).into_data());
            }
            Op::Reshape(x) => self.acc(grads, *x, || gd.to_vec()),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); y.len()];
                    for ((o, yr), gr) in out.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let s = dot(yr, gr);
                        for ((d, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - s);
                        }
                    }
                    out
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); y.len()];
                    for ((o, yr), gr) in out.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let s = gr.iter().copied().sum::<T>();
                        for ((d, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *d = gv - yv.exp() * s;
                        }
                    }
                    out
                });
            }
            Op::LayerNorm { x, rstd } => {
                let xh = node.value.data();
                let n = node.value.last_dim();
                let nf = T::of(n as f64);
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); xh.len()];
                    for (r, ((o, xr), gr)) in out
                        .chunks_mut(n)
                        .zip(xh.chunks(n))
                        .zip(gd.chunks(n))
                        .enumerate()
                    {
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgx = dot(gr, xr) / nf;
                        for ((d, &xv), &gv) in o.iter_mut().zip(xr).zip(gr) {
                            *d = rstd[r] * (gv - mg - xv * mgx);
                        }
                    }
                    out
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three = T::of(3.0);
                self.acc(grads, *x, || {
                    xv.iter()
                        .zip(gd)
                        .map(|(&v, &gv)| {
                            let t = (c * (v + a * v * v * v)).tanh();
                            let du = c * (T::one() + three * a * v * v);
                            gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                        })
                        .collect()
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, || {
                    y.iter().zip(gd).map(|(&yv, &gv)| gv * (T::one() - yv * yv)).collect()
                });
            }
            Op::Mean { x, axis } => {
                let sx = self.value(*x).shape().to_vec();
                let (outer, len, inner) = split_at_axis(&sx, *axis);
                let inv = T::one() / T::of(len as f64);
                self.acc(grads, *x, || {
                    let mut out = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for _ in 0..len {
                            out.extend(src.iter().map(|&v| v * inv));
                        }
                    }
                    out
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, || vec![gd[0]; n]);
            }
            Op::Slice { x, axis, start } => {
                let sx = self.value(*x).shape().to_vec();
                let (outer, full, inner) = split_at_axis(&sx, *axis);
                let len = node.value.shape()[*axis];
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); outer * full * inner];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        out[dst..dst + len * inner]
                            .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    out
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).shape()[*axis];
                    self.acc(grads, v, || {
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            out.extend_from_slice(&gd[from..from + len * inner]);
                        }
                        out
                    });
                    offset += len;
                }
            }
        }
    }

    /// Adds a gradient contribution to `v` if it needs one. The closure is
    /// only evaluated when it does.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: impl FnOnce() -> Vec<T>) {
        if !self.ng(v) {
            return;
        }
        let c = contrib();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(c) {
                    *e += x;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), c).expect("gradient shape"));
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s = row.iter().map(|&v| (v - max).exp()).sum::<T>();
    max + s.ln()
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let sx = x.shape();
    let nd = sx.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * sx[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..xd.len() {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(xd[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permuted shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_t_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let y = tape.matmul_t(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(y).shape(), &[1, 3]);
    }

    #[test]
    fn shape_errors_carry_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        match tape.add(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let q = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(q), tape.value(x));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.7).sin() * 4.0));
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.param(t(&[1, 2], &[3.0, 4.0]));
        let y = tape.matmul_t(x, w).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
