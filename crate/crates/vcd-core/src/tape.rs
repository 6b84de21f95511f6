//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a linear tape during the forward pass and
//! replayed in reverse for gradients. A tape lives for one evaluation (one
//! training step builds a fresh tape), parents always precede children, and
//! the backward sweep visits nodes in strict reverse order, so gradients of
//! identical tapes are bit-identical.
//!
//! Shape mismatches are programming errors and panic with the offending
//! shapes named; operational failures (non-finite losses, bad files) are
//! `Result`s elsewhere.

use crate::tensor::{gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    MaxConst(Var, f64),
    /// Straight-through gate: forward 1(x > 0), backward sigmoid'(x).
    HardGate(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    /// Grouped matmul over a leading group axis.
    Bmm { a: Var, b: Var, trans_b: bool },
    ConcatLast(Var, Var),
    SliceLast { x: Var, start: usize, len: usize },
    Broadcast(Var),
    Transpose2(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

/// Recording tape. Rebuilt per evaluation; see module docs.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(256)
    }

    pub fn with_capacity(cap: usize) -> Self {
        Tape {
            ops: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
            grads: Vec::with_capacity(cap),
            requires: Vec::with_capacity(cap),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Drop every node at or past `len`, keeping earlier ones valid.
    pub fn truncate(&mut self, len: usize) {
        self.ops.truncate(len);
        self.values.truncate(len);
        self.grads.truncate(len);
        self.requires.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        Var(self.ops.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Leaf holding a constant; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn binary_elementwise(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> (Tensor, bool) {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        (
            Tensor::from_vec(ta.shape(), data),
            self.req(a) || self.req(b),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, r) = self.binary_elementwise(a, b, "add", |x, y| x + y);
        self.push(Op::Add(a, b), t, r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (t, r) = self.binary_elementwise(a, b, "sub", |x, y| x - y);
        self.push(Op::Sub(a, b), t, r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, r) = self.binary_elementwise(a, b, "mul", |x, y| x * y);
        self.push(Op::Mul(a, b), t, r)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let r = self.req(a);
        self.push(op, t, r)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// max(x, c) with sub-gradient 0 below the threshold.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MaxConst(a, c), |x| x.max(c))
    }

    /// Forward is exactly 1(x > 0); backward passes sigmoid'(x).
    pub fn hard_gate(&mut self, a: Var) -> Var {
        self.unary(a, Op::HardGate(a), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// a · bᵀ without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul: rank-2 operands required, got {:?} and {:?}",
            sa,
            sb
        );
        let (m, k) = (sa[0], sa[1]);
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(
            k, bk,
            "matmul: inner extents differ, {:?} x {:?}{}",
            sa, sb,
            if trans_b { " (transposed)" } else { "" }
        );
        let mut c = vec![0.0; m * n];
        if trans_b {
            gemm_nt_acc(&mut c, ta.data(), tb.data(), m, k, n);
        } else {
            gemm_nn_acc(&mut c, ta.data(), tb.data(), m, k, n);
        }
        let r = self.req(a) || self.req(b);
        self.push(Op::MatMul { a, b, trans_b }, Tensor::from_vec(&[m, n], c), r)
    }

    /// Grouped matmul: [G,m,k] · [G,k,n] (or [G,n,k] transposed) → [G,m,n].
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
            "bmm: want matching rank-3 groups, got {:?} and {:?}",
            sa,
            sb
        );
        let g = sa[0];
        let (m, k) = (sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(
            k, bk,
            "bmm: inner extents differ, {:?} x {:?}{}",
            sa, sb,
            if trans_b { " (transposed)" } else { "" }
        );
        let mut c = vec![0.0; g * m * n];
        for gi in 0..g {
            let av = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let bv = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let cv = &mut c[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt_acc(cv, av, bv, m, k, n);
            } else {
                gemm_nn_acc(cv, av, bv, m, k, n);
            }
        }
        let r = self.req(a) || self.req(b);
        self.push(Op::Bmm { a, b, trans_b }, Tensor::from_vec(&[g, m, n], c), r)
    }

    // ── shape ──────────────────────────────────────────────────────────

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(
            sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1],
            "concat: leading extents differ, {:?} vs {:?}",
            sa,
            sb
        );
        let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = Vec::with_capacity(rows * (la + lb));
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * la..(r + 1) * la]);
            out.extend_from_slice(&tb.data()[r * lb..(r + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = la + lb;
        let r = self.req(a) || self.req(b);
        self.push(Op::ConcatLast(a, b), Tensor::from_vec(&shape, out), r)
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.values[x.0];
        let sx = tx.shape();
        let width = *sx.last().expect("slice: rank-0 input");
        assert!(
            start + len <= width,
            "slice: [{start}, {start}+{len}) out of last extent {width} in {:?}",
            sx
        );
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = len;
        let r = self.req(x);
        self.push(Op::SliceLast { x, start, len }, Tensor::from_vec(&shape, out), r)
    }

    /// Broadcast to `shape`, numpy-style (align trailing axes; extents must
    /// match or be 1 in the source).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Var {
        let sx = self.values[x.0].shape().to_vec();
        assert!(
            broadcast_compatible(&sx, shape),
            "broadcast: {:?} does not expand to {:?}",
            sx,
            shape
        );
        let out = broadcast_forward(&self.values[x.0], shape);
        let r = self.req(x);
        self.push(Op::Broadcast(x), out, r)
    }

    pub fn transpose2(&mut self, x: Var) -> Var {
        let tx = &self.values[x.0];
        let sx = tx.shape();
        assert!(sx.len() == 2, "transpose: rank-2 input required, got {:?}", sx);
        let (m, n) = (sx[0], sx[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = tx.data()[i * n + j];
            }
        }
        let r = self.req(x);
        self.push(Op::Transpose2(x), Tensor::from_vec(&[n, m], out), r)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.values[x.0].clone().reshaped(shape);
        let r = self.req(x);
        self.push(Op::Reshape(x), t, r)
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.values[x.0].data().iter().sum();
        let r = self.req(x);
        self.push(Op::Sum(x), Tensor::scalar(s), r)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let r = self.req(x);
        self.push(Op::Mean(x), Tensor::scalar(s), r)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Populate gradients of `root` w.r.t. every differentiable ancestor.
    /// Clears previous gradients first, so a tape can be differentiated
    /// from several roots in turn.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.values[root.0].numel(),
            1,
            "backward: root must be scalar, got shape {:?}",
            self.values[root.0].shape()
        );
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(Tensor::filled(self.values[root.0].shape(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let op = self.ops[i].clone();
            // Only flow into parents that themselves require gradients.
            let want = |v: Var| self.requires[v.0];
            let values = &self.values;
            let mut sink = |v: Var, add: &mut dyn FnMut(&mut Tensor)| {
                if !want(v) {
                    return;
                }
                let slot = &mut lo[v.0];
                if slot.is_none() {
                    *slot = Some(Tensor::zeros(values[v.0].shape()));
                }
                add(slot.as_mut().unwrap());
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    sink(a, &mut |t| accumulate(t, g.data()));
                    sink(b, &mut |t| accumulate(t, g.data()));
                }
                Op::Sub(a, b) => {
                    sink(a, &mut |t| accumulate(t, g.data()));
                    sink(b, &mut |t| {
                        for (o, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                            *o -= gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    sink(a, &mut |t| {
                        for ((o, &gv), &bv) in
                            t.data_mut().iter_mut().zip(g.data()).zip(values[b.0].data())
                        {
                            *o += gv * bv;
                        }
                    });
                    sink(b, &mut |t| {
                        for ((o, &gv), &av) in
                            t.data_mut().iter_mut().zip(g.data()).zip(values[a.0].data())
                        {
                            *o += gv * av;
                        }
                    });
                }
                Op::Neg(a) => sink(a, &mut |t| {
                    for (o, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *o -= gv;
                    }
                }),
                Op::Scale(a, c) => sink(a, &mut |t| {
                    for (o, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += c * gv;
                    }
                }),
                Op::AddScalar(a) => sink(a, &mut |t| accumulate(t, g.data())),
                Op::Sigmoid(a) => {
                    let y = values[i].data();
                    sink(a, &mut |t| {
                        for ((o, &gv), &yv) in t.data_mut().iter_mut().zip(g.data()).zip(y) {
                            *o += gv * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = values[i].data();
                    sink(a, &mut |t| {
                        for ((o, &gv), &yv) in t.data_mut().iter_mut().zip(g.data()).zip(y) {
                            *o += gv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = values[i].data();
                    sink(a, &mut |t| {
                        for ((o, &gv), &yv) in t.data_mut().iter_mut().zip(g.data()).zip(y) {
                            *o += gv * yv;
                        }
                    });
                }
                Op::Log(a) => {
                    let x = values[a.0].data();
                    sink(a, &mut |t| {
                        for ((o, &gv), &xv) in t.data_mut().iter_mut().zip(g.data()).zip(x) {
                            *o += gv / xv;
                        }
                    });
                }
                Op::Square(a) => {
                    let x = values[a.0].data();
                    sink(a, &mut |t| {
                        for ((o, &gv), &xv) in t.data_mut().iter_mut().zip(g.data()).zip(x) {
                            *o += 2.0 * xv * gv;
                        }
                    });
                }
                Op::MaxConst(a, c) => {
                    let x = values[a.0].data();
                    sink(a, &mut |t| {
                        for ((o, &gv), &xv) in t.data_mut().iter_mut().zip(g.data()).zip(x) {
                            if xv >= c {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::HardGate(a) => {
                    let x = values[a.0].data();
                    sink(a, &mut |t| {
                        for ((o, &gv), &xv) in t.data_mut().iter_mut().zip(g.data()).zip(x) {
                            let s = sigmoid(xv);
                            *o += gv * s * (1.0 - s);
                        }
                    });
                }
                Op::MatMul { a, b, trans_b } => {
                    let sa = values[a.0].shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = values[i].shape()[1];
                    let (av, bv, gv) = (values[a.0].data(), values[b.0].data(), g.data());
                    if trans_b {
                        sink(a, &mut |t| gemm_nn_acc(t.data_mut(), gv, bv, m, n, k));
                        sink(b, &mut |t| gemm_tn_acc(t.data_mut(), gv, av, n, m, k));
                    } else {
                        sink(a, &mut |t| gemm_nt_acc(t.data_mut(), gv, bv, m, n, k));
                        sink(b, &mut |t| gemm_tn_acc(t.data_mut(), av, gv, k, m, n));
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let sa = values[a.0].shape();
                    let (grp, m, k) = (sa[0], sa[1], sa[2]);
                    let n = values[i].shape()[2];
                    let (av, bv, gv) = (values[a.0].data(), values[b.0].data(), g.data());
                    sink(a, &mut |t| {
                        for gi in 0..grp {
                            let gs = &gv[gi * m * n..(gi + 1) * m * n];
                            let bs = &bv[gi * k * n..(gi + 1) * k * n];
                            let ts = &mut t.data_mut()[gi * m * k..(gi + 1) * m * k];
                            if trans_b {
                                gemm_nn_acc(ts, gs, bs, m, n, k);
                            } else {
                                gemm_nt_acc(ts, gs, bs, m, n, k);
                            }
                        }
                    });
                    sink(b, &mut |t| {
                        for gi in 0..grp {
                            let gs = &gv[gi * m * n..(gi + 1) * m * n];
                            let as_ = &av[gi * m * k..(gi + 1) * m * k];
                            let ts = &mut t.data_mut()[gi * k * n..(gi + 1) * k * n];
                            if trans_b {
                                gemm_tn_acc(ts, gs, as_, n, m, k);
                            } else {
                                gemm_tn_acc(ts, as_, gs, k, m, n);
                            }
                        }
                    });
                }
                Op::ConcatLast(a, b) => {
                    let la = *values[a.0].shape().last().unwrap();
                    let lb = *values[b.0].shape().last().unwrap();
                    let rows = values[a.0].numel() / la;
                    let gv = g.data();
                    sink(a, &mut |t| {
                        for r in 0..rows {
                            let dst = &mut t.data_mut()[r * la..(r + 1) * la];
                            let src = &gv[r * (la + lb)..r * (la + lb) + la];
                            for (o, &x) in dst.iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    });
                    sink(b, &mut |t| {
                        for r in 0..rows {
                            let dst = &mut t.data_mut()[r * lb..(r + 1) * lb];
                            let src = &gv[r * (la + lb) + la..(r + 1) * (la + lb)];
                            for (o, &x) in dst.iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::SliceLast { x, start, len } => {
                    let width = *values[x.0].shape().last().unwrap();
                    let rows = values[x.0].numel() / width;
                    let gv = g.data();
                    sink(x, &mut |t| {
                        for r in 0..rows {
                            let dst = &mut t.data_mut()[r * width + start..r * width + start + len];
                            let src = &gv[r * len..(r + 1) * len];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::Broadcast(x) => {
                    let out_shape = values[i].shape().to_vec();
                    sink(x, &mut |t| broadcast_backward(t, g, &out_shape));
                }
                Op::Transpose2(x) => {
                    let (n, m) = (values[i].shape()[0], values[i].shape()[1]);
                    let gv = g.data();
                    sink(x, &mut |t| {
                        let td = t.data_mut();
                        for j in 0..n {
                            for ii in 0..m {
                                td[ii * n + j] += gv[j * m + ii];
                            }
                        }
                    });
                }
                Op::Reshape(x) => sink(x, &mut |t| accumulate(t, g.data())),
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    sink(x, &mut |t| {
                        for o in t.data_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::Mean(x) => {
                    let n = values[x.0].numel() as f64;
                    let gv = g.data()[0] / n;
                    sink(x, &mut |t| {
                        for o in t.data_mut() {
                            *o += gv;
                        }
                    });
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(t: &mut Tensor, src: &[f64]) {
    for (o, &v) in t.data_mut().iter_mut().zip(src) {
        *o += v;
    }
}

fn broadcast_compatible(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    src.iter()
        .rev()
        .zip(dst.iter().rev())
        .all(|(&s, &d)| s == d || s == 1)
}

fn broadcast_forward(src: &Tensor, dst_shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(dst_shape);
    let rank = dst_shape.len();
    // Source strides aligned to trailing axes; broadcast axes get stride 0.
    let mut strides = vec![0usize; rank];
    let offset = rank - src.shape().len();
    let mut acc = 1;
    for ax in (0..src.shape().len()).rev() {
        strides[offset + ax] = if src.shape()[ax] == 1 { 0 } else { acc };
        acc *= src.shape()[ax];
    }
    let mut idx = vec![0usize; rank];
    let sd = src.data();
    for o in out.data_mut() {
        let mut off = 0;
        for ax in 0..rank {
            off += idx[ax] * strides[ax];
        }
        *o = sd[off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < dst_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn broadcast_backward(dst: &mut Tensor, g: &Tensor, out_shape: &[usize]) {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let offset = rank - dst.shape().len();
    let mut acc = 1;
    let dst_shape = dst.shape().to_vec();
    for ax in (0..dst_shape.len()).rev() {
        strides[offset + ax] = if dst_shape[ax] == 1 { 0 } else { acc };
        acc *= dst_shape[ax];
    }
    let dd = dst.data_mut();
    let mut idx = vec![0usize; rank];
    for &gv in g.data() {
        let mut off = 0;
        for ax in 0..rank {
            off += idx[ax] * strides[ax];
        }
        dd[off] += gv;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
