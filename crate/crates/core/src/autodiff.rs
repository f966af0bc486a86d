//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Operations execute eagerly and record what backward needs. A tape is
//! single-threaded; independent tapes (one per clip) are cheap to create
//! and drop. Gradients accumulate additively when a value is used twice.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_into, matmul_tn, transpose, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// y = a * scale + shift; backward only needs the scale
    Affine { a: Var, scale: F },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var },
    MaxPoolFreq { x: Var, factor: usize },
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Clamp { a: Var, lo: F, hi: F },
    Softmax { a: Var, axis: usize },
    SumAxis { a: Var, axis: usize },
    SumAll(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf; backward never reaches through it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Checks `b` broadcasts over `a` (equal shapes, or `b`'s shape is a
    /// suffix of `a`'s — leading-axis expansion only).
    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        self.check_broadcast(op_name, a, b)?;
        let bn = self.value(b).len();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<F> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % bn]))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// y = a * scale + shift, elementwise with constants.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Var {
        let value = self.value(a).map(|x| x * scale + shift);
        let ng = self.needs(a);
        self.push(value, Op::Affine { a, scale }, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -F::ONE, F::ZERO)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data).expect("matmul shape");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// 2-D convolution over `x: [T, F, C_in]` with kernel
    /// `w: [KH, KW, C_in, C_out]` (odd KH/KW, stride 1, zero "same"
    /// padding) plus bias `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let ok = sx.len() == 3
            && sw.len() == 4
            && sb.len() == 1
            && sw[2] == sx[2]
            && sw[3] == sb[0]
            && sw[0] % 2 == 1
            && sw[1] % 2 == 1;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        let (t, f, c) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        let cols = im2col(self.value(x).data(), t, f, c, kh, kw);
        let mut y = matmul(&cols, self.value(w).data(), t * f, kh * kw * c, cout);
        let bias = self.value(b).data();
        for row in y.chunks_exact_mut(cout) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v = *v + bv;
            }
        }
        let value = Tensor::new(vec![t, f, cout], y).expect("conv shape");
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv2d { x, w, b }, ng))
    }

    /// Max-pool along the frequency axis of `x: [T, F, C]`; F must divide
    /// by `factor`. Time resolution is untouched.
    pub fn maxpool_freq(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || factor == 0 || sx[1] % factor != 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool_freq",
                left: sx,
                right: vec![factor],
            });
        }
        let (t, f, c) = (sx[0], sx[1], sx[2]);
        let fo = f / factor;
        let xs = self.value(x).data();
        let mut y = vec![F::ZERO; t * fo * c];
        for ti in 0..t {
            for fj in 0..fo {
                let base = (ti * f + fj * factor) * c;
                let out = (ti * fo + fj) * c;
                for ch in 0..c {
                    let mut best = xs[base + ch];
                    for s in 1..factor {
                        let v = xs[base + s * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                    y[out + ch] = best;
                }
            }
        }
        let value = Tensor::new(vec![t, fo, c], y).expect("pool shape");
        let ng = self.needs(x);
        Ok(self.push(value, Op::MaxPoolFreq { x, factor }, ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| F::ONE / (F::ONE + (-x).exp()));
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let ng = self.needs(a);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let value = self.value(a).map(|x| x.max_s(lo).min_s(hi));
        let ng = self.needs(a);
        self.push(value, Op::Clamp { a, lo, hi }, ng)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                left: sa,
                right: vec![axis],
            });
        }
        let (outer, lanes, inner) = lane_dims(&sa, axis);
        let xs = self.value(a).data();
        let mut y = vec![F::ZERO; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * lanes + l) * inner + i;
                let mut mx = xs[idx(0)];
                for l in 1..lanes {
                    mx = mx.max_s(xs[idx(l)]);
                }
                let mut sum = F::ZERO;
                for l in 0..lanes {
                    let e = (xs[idx(l)] - mx).exp();
                    y[idx(l)] = e;
                    sum = sum + e;
                }
                for l in 0..lanes {
                    y[idx(l)] = y[idx(l)] / sum;
                }
            }
        }
        let value = Tensor::new(sa, y).expect("softmax shape");
        let ng = self.needs(a);
        Ok(self.push(value, Op::Softmax { a, axis }, ng))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                left: sa,
                right: vec![axis],
            });
        }
        let (outer, lanes, inner) = lane_dims(&sa, axis);
        let xs = self.value(a).data();
        let mut y = vec![F::ZERO; outer * inner];
        for o in 0..outer {
            for l in 0..lanes {
                let src = (o * lanes + l) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    y[dst + i] = y[dst + i] + xs[src + i];
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let value = Tensor::new(shape, y).expect("sum shape");
        let ng = self.needs(a);
        Ok(self.push(value, Op::SumAxis { a, axis }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.affine(s, F::ONE / F::from_f64(n as f64), F::ZERO)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: vec![],
                right: vec![axis],
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: first,
                right: vec![axis],
            });
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == first.len()
                && sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: sp.to_vec(),
                });
            }
            total_axis += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut data = vec![F::ZERO; shape.iter().product()];
        let out_block = total_axis * inner;
        let mut offset = 0usize;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let block = pa * inner;
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = o * out_block + offset;
                data[dst..dst + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let value = Tensor::new(shape, data).expect("concat shape");
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: sa,
                right: vec![axis, start, len],
            });
        }
        let (outer, lanes, inner) = lane_dims(&sa, axis);
        let xs = self.value(a).data();
        let mut shape = sa;
        shape[axis] = len;
        let mut data = vec![F::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = (o * lanes + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xs[src..src + len * inner]);
        }
        let value = Tensor::new(shape, data).expect("slice shape");
        let ng = self.needs(a);
        Ok(self.push(
            value,
            Op::Slice {
                a,
                axis,
                start,
                len,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Reverse pass from a scalar loss. Gradients for leaves created with
    /// [`Tape::input`] (and every intermediate contributing to them) are
    /// returned; constants get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: self.shape(loss).to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), F::ONE));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.visit_backward(id, &g, &mut grads);
            // Leaf gradients are the caller's result; keep them.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: &[F]) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(t) => {
                for (dst, &d) in t.data_mut().iter_mut().zip(delta) {
                    *dst = *dst + d;
                }
            }
            None => {
                let t = Tensor::new(self.shape(v).to_vec(), delta.to_vec())
                    .expect("gradient shape matches value");
                *slot = Some(t);
            }
        }
    }

    /// Like `accumulate` but reduces `delta` (shaped like `big`) onto the
    /// suffix-broadcast shape of `v` first.
    fn accumulate_reduced(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: &[F]) {
        if !self.needs(v) {
            return;
        }
        let vn = self.value(v).len();
        if vn == delta.len() {
            self.accumulate(grads, v, delta);
            return;
        }
        let mut reduced = vec![F::ZERO; vn];
        for chunk in delta.chunks_exact(vn) {
            for (r, &d) in reduced.iter_mut().zip(chunk) {
                *r = *r + d;
            }
        }
        self.accumulate(grads, v, &reduced);
    }

    #[allow(clippy::too_many_lines)]
    fn visit_backward(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate_reduced(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd);
                let neg: Vec<F> = gd.iter().map(|&x| -x).collect();
                self.accumulate_reduced(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bn = bv.len();
                if self.needs(*a) {
                    let da: Vec<F> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * bv[i % bn])
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<F> = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.accumulate_reduced(grads, *b, &db);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                let yv = self.nodes[id].value.data();
                let bn = bv.len();
                if self.needs(*a) {
                    let da: Vec<F> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x / bv[i % bn])
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<F> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| -x * yv[i] / bv[i % bn])
                        .collect();
                    self.accumulate_reduced(grads, *b, &db);
                }
            }
            Op::Affine { a, scale } => {
                let da: Vec<F> = gd.iter().map(|&x| x * *scale).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = g * B^T
                    let bt = transpose(self.value(*b).data(), k, n);
                    let da = matmul(gd, &bt, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T * g
                    let db = matmul_tn(self.value(*a).data(), gd, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Conv2d { x, w, b } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (t, f, c) = (sx[0], sx[1], sx[2]);
                let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
                if self.needs(*b) {
                    let mut db = vec![F::ZERO; cout];
                    for row in gd.chunks_exact(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
                if self.needs(*w) {
                    let cols = im2col(self.value(*x).data(), t, f, c, kh, kw);
                    let dw = matmul_tn(&cols, gd, t * f, kh * kw * c, cout);
                    self.accumulate(grads, *w, &dw);
                }
                if self.needs(*x) {
                    let kk = kh * kw * c;
                    let wt = transpose(self.value(*w).data(), kk, cout);
                    let mut dcols = vec![F::ZERO; t * f * kk];
                    matmul_into(gd, &wt, &mut dcols, t * f, cout, kk);
                    let dx = col2im(&dcols, t, f, c, kh, kw);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::MaxPoolFreq { x, factor } => {
                if !self.needs(*x) {
                    return;
                }
                let sx = self.shape(*x);
                let (t, f, c) = (sx[0], sx[1], sx[2]);
                let fo = f / factor;
                let xs = self.value(*x).data();
                let mut dx = vec![F::ZERO; xs.len()];
                for ti in 0..t {
                    for fj in 0..fo {
                        let base = (ti * f + fj * factor) * c;
                        let out = (ti * fo + fj) * c;
                        for ch in 0..c {
                            // first maximum wins, matching forward
                            let mut best = 0usize;
                            let mut bv = xs[base + ch];
                            for s in 1..*factor {
                                let v = xs[base + s * c + ch];
                                if v > bv {
                                    bv = v;
                                    best = s;
                                }
                            }
                            dx[base + best * c + ch] = dx[base + best * c + ch] + gd[out + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[id].value.data();
                let da: Vec<F> = gd
                    .iter()
                    .zip(yv)
                    .map(|(&x, &y)| x * y * (F::ONE - y))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let yv = self.nodes[id].value.data();
                let da: Vec<F> = gd
                    .iter()
                    .zip(yv)
                    .map(|(&x, &y)| x * (F::ONE - y * y))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Ln(a) => {
                let xv = self.value(*a).data();
                let da: Vec<F> = gd.iter().zip(xv).map(|(&x, &v)| x / v).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Clamp { a, lo, hi } => {
                let xv = self.value(*a).data();
                let da: Vec<F> = gd
                    .iter()
                    .zip(xv)
                    .map(|(&x, &v)| if v >= *lo && v <= *hi { x } else { F::ZERO })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax { a, axis } => {
                let sa = self.shape(*a).to_vec();
                let (outer, lanes, inner) = lane_dims(&sa, *axis);
                let yv = self.nodes[id].value.data();
                let mut da = vec![F::ZERO; yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * lanes + l) * inner + i;
                        let mut dot = F::ZERO;
                        for l in 0..lanes {
                            dot = dot + gd[idx(l)] * yv[idx(l)];
                        }
                        for l in 0..lanes {
                            da[idx(l)] = yv[idx(l)] * (gd[idx(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::SumAxis { a, axis } => {
                let sa = self.shape(*a).to_vec();
                let (outer, lanes, inner) = lane_dims(&sa, *axis);
                let mut da = vec![F::ZERO; self.value(*a).len()];
                for o in 0..outer {
                    for l in 0..lanes {
                        let dst = (o * lanes + l) * inner;
                        let src = o * inner;
                        for i in 0..inner {
                            da[dst + i] = gd[src + i];
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![gd[0]; self.value(*a).len()];
                self.accumulate(grads, *a, &da);
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[id].value.shape().to_vec();
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let out_block = shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let pa = self.shape(p)[*axis];
                    let block = pa * inner;
                    if self.needs(p) {
                        let mut dp = vec![F::ZERO; self.value(p).len()];
                        for o in 0..outer {
                            let src = o * out_block + offset;
                            dp[o * block..(o + 1) * block]
                                .copy_from_slice(&gd[src..src + block]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += block;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                let sa = self.shape(*a).to_vec();
                let (outer, lanes, inner) = lane_dims(&sa, *axis);
                let mut da = vec![F::ZERO; self.value(*a).len()];
                for o in 0..outer {
                    let dst = (o * lanes + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, gd);
            }
        }
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lanes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lanes, inner)
}

/// Gather the 3x3 (or KHxKW) neighborhoods of `x: [T, F, C]` into a
/// `[T*F, KH*KW*C]` matrix with zero padding; column order (kh, kw, c)
/// matches a `[KH, KW, C_in, C_out]` kernel flattened to 2-D.
fn im2col<F: Scalar>(x: &[F], t: usize, f: usize, c: usize, kh: usize, kw: usize) -> Vec<F> {
    let (ph, pw) = (kh / 2, kw / 2);
    let colw = kh * kw * c;
    let mut cols = vec![F::ZERO; t * f * colw];
    for ti in 0..t {
        for dh in 0..kh {
            let si = ti as isize + dh as isize - ph as isize;
            if si < 0 || si >= t as isize {
                continue;
            }
            let srow = (si as usize) * f;
            for fi in 0..f {
                let base = (ti * f + fi) * colw + dh * kw * c;
                for dw in 0..kw {
                    let sj = fi as isize + dw as isize - pw as isize;
                    if sj < 0 || sj >= f as isize {
                        continue;
                    }
                    let src = (srow + sj as usize) * c;
                    let dst = base + dw * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of [`im2col`].
fn col2im<F: Scalar>(cols: &[F], t: usize, f: usize, c: usize, kh: usize, kw: usize) -> Vec<F> {
    let (ph, pw) = (kh / 2, kw / 2);
    let colw = kh * kw * c;
    let mut x = vec![F::ZERO; t * f * c];
    for ti in 0..t {
        for dh in 0..kh {
            let si = ti as isize + dh as isize - ph as isize;
            if si < 0 || si >= t as isize {
                continue;
            }
            let srow = (si as usize) * f;
            for fi in 0..f {
                let base = (ti * f + fi) * colw + dh * kw * c;
                for dw in 0..kw {
                    let sj = fi as isize + dw as isize - pw as isize;
                    if sj < 0 || sj >= f as isize {
                        continue;
                    }
                    let dst = (srow + sj as usize) * c;
                    let src = base + dw * c;
                    for ch in 0..c {
                        x[dst + ch] = x[dst + ch] + cols[src + ch];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).as_scalar().unwrap(), 0.5);
    }

    #[test]
    fn softmax_of_constant_vector_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 5], vec![3.7; 5]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_1x1_kernel_scales_elementwise() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            Tensor::new(vec![2, 3, 1], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap(),
        );
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap());
        let b = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, w, b).unwrap();
        let got = tape.value(y).data().to_vec();
        let want: Vec<f64> = [1.0, -2.0, 3.0, 0.5, 0.0, -1.5]
            .iter()
            .map(|v| v * 2.5)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2p() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t2(&[vec![1.0, -2.0, 0.5]]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn reusing_an_input_accumulates_gradients() {
        // loss = sum(p) + sum(p * c): grad = 1 + c, summed from two paths.
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t2(&[vec![1.0, 2.0]]));
        let c = tape.constant(t2(&[vec![3.0, 4.0]]));
        let s1 = tape.sum_all(p);
        let pc = tape.mul(p, c).unwrap();
        let s2 = tape.sum_all(pc);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t2(&[vec![1.0, 2.0]]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t2(&[vec![1.0]]));
        let c = tape.constant(t2(&[vec![5.0]]));
        let y = tape.mul(p, c).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[5.0]);
    }

    #[test]
    fn slice_concat_roundtrip_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let top = tape.slice(p, 0, 0, 1).unwrap();
        let rest = tape.slice(p, 0, 1, 2).unwrap();
        let back = tape.concat(&[top, rest], 0).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(p).data());
        let two = tape.affine(back, 2.0, 0.0);
        let loss = tape.sum_all(two);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0; 6]);
    }

    #[test]
    fn maxpool_freq_picks_maximum_and_routes_gradient() {
        let mut tape = Tape::<f64>::new();
        // [1, 4, 1]: pool factor 4 -> single output = 7
        let p = tape.input(Tensor::new(vec![1, 4, 1], vec![1.0, 7.0, 3.0, 5.0]).unwrap());
        let y = tape.maxpool_freq(p, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
