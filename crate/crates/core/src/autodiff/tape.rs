//! Reverse-mode differentiation tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the node list from the loss down to index 0, which is a valid
//! reverse topological order because inputs are always recorded before
//! their consumers.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tag: u64,
}

/// How the smaller operand of a binary op repeats over the larger one.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// rhs repeats cyclically over lhs
    Rhs,
    /// lhs repeats cyclically over rhs
    Lhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Silu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    tag: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// C = op(A) * op(B) + beta * C with row-major storage.
///
/// `ta` means A is stored as [k, m]; `tb` means B is stored as [n, k].
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        return Ok((Bcast::Same, a.to_vec()));
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let sa = strip_leading_ones(a);
    let sb = strip_leading_ones(b);
    if sa == sb {
        let shape = if a.len() >= b.len() { a } else { b };
        return Ok((Bcast::Same, shape.to_vec()));
    }
    if nb < na && (nb == 1 || sa.ends_with(sb)) {
        return Ok((Bcast::Rhs, a.to_vec()));
    }
    if na < nb && (na == 1 || sb.ends_with(sa)) {
        return Ok((Bcast::Lhs, b.to_vec()));
    }
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Sums a full-size gradient down to a cyclically repeated operand.
fn reduce_cyclic(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            tag: fresh_tag(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient; existing `Var`s become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.tag = fresh_tag();
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tag != self.tag || v.idx >= self.nodes.len() {
            return Err(Error::StaleVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            idx: self.nodes.len() - 1,
            tag: self.tag,
        }
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor>> {
        let i = self.check(v)?;
        Ok(self.grads[i].as_ref())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (mode, shape) = bcast(name, va.shape(), vb.shape())?;
        let (da, db) = (va.data(), vb.data());
        let data: Vec<f64> = match mode {
            Bcast::Same => da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Rhs => {
                let nb = db.len();
                da.iter().enumerate().map(|(i, x)| f(*x, db[i % nb])).collect()
            }
            Bcast::Lhs => {
                let na = da.len();
                db.iter().enumerate().map(|(i, y)| f(da[i % na], *y)).collect()
            }
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::new(shape, data)?, mk(ia, ib, mode), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * c);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Scale(ia, c), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(ia, ib), rg))
    }

    /// `x W + b` with `x: [B, in]` (or `[in]`), `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (vx, vw, vb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        let shape_err = || Error::Shape {
            op: "affine",
            lhs: vx.shape().to_vec(),
            rhs: vw.shape().to_vec(),
        };
        if vw.rank() != 2 || vx.rank() == 0 || vx.rank() > 2 {
            return Err(shape_err());
        }
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        if vx.cols() != k {
            return Err(shape_err());
        }
        if vb.numel() != n {
            return Err(Error::Shape {
                op: "affine",
                lhs: vw.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let m = vx.rows();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(vb.data());
        }
        gemm(m, k, n, vx.data(), false, vw.data(), false, &mut out, 1.0);
        let shape = if vx.rank() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(&[ix, iw, ib]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine(ix, iw, ib), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, mk: impl Fn(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, mk(ia), rg))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, Op::Cos)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.sum();
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(ia), rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let first = match idx.first() {
            Some(&i) => self.nodes[i].value.shape().to_vec(),
            None => return Err(invalid("concat of zero tensors")),
        };
        if axis >= first.len() {
            return Err(invalid(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(&idx);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat { parts: idx, axis },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let s = v.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid(format!(
                "slice axis {axis} [{start}, {}) of shape {s:?}",
                start + len
            )));
        }
        let (outer, inner) = axis_split(&s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[ia]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Slice {
                src: ia,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    /// Copies the value into a fresh constant leaf; no gradient flows back.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.clone();
        Ok(self.constant(v))
    }

    /// Accumulates d(loss)/d(leaf) into every trainable leaf reachable from
    /// `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[il].requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        adj[il] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
            match &mut adj[i] {
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=il).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let rg = |j: usize| nodes[j].requires_grad;
            let val = |j: usize| nodes[j].value.data();
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    match &mut grads[i] {
                        Some(t) => {
                            for (x, y) in t.data_mut().iter_mut().zip(&g) {
                                *x += y;
                            }
                        }
                        slot @ None => *slot = Some(Tensor::new(shape, g)?),
                    }
                }
                &Op::Add(a, b, mode) | &Op::Sub(a, b, mode) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if rg(a) {
                        let ga = match mode {
                            Bcast::Lhs => reduce_cyclic(&g, val(a).len()),
                            _ => g.clone(),
                        };
                        acc(&mut adj, a, ga);
                    }
                    if rg(b) {
                        let mut gb = match mode {
                            Bcast::Rhs => reduce_cyclic(&g, val(b).len()),
                            _ => g.clone(),
                        };
                        if sign < 0.0 {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        acc(&mut adj, b, gb);
                    }
                }
                &Op::Mul(a, b, mode) => {
                    let (da, db) = (val(a), val(b));
                    let (na, nb) = (da.len(), db.len());
                    if rg(a) {
                        let full: Vec<f64> =
                            g.iter().enumerate().map(|(k, gk)| gk * db[k % nb]).collect();
                        let ga = match mode {
                            Bcast::Lhs => reduce_cyclic(&full, na),
                            _ => full,
                        };
                        acc(&mut adj, a, ga);
                    }
                    if rg(b) {
                        let full: Vec<f64> =
                            g.iter().enumerate().map(|(k, gk)| gk * da[k % na]).collect();
                        let gb = match mode {
                            Bcast::Rhs => reduce_cyclic(&full, nb),
                            _ => full,
                        };
                        acc(&mut adj, b, gb);
                    }
                }
                &Op::Scale(a, c) => {
                    acc(&mut adj, a, g.iter().map(|v| v * c).collect());
                }
                &Op::MatMul(a, b) => {
                    let (sa, sb) = (
                        nodes[a].value.shape(),
                        nodes[b].value.shape(),
                    );
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if rg(a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, val(b), true, &mut ga, 0.0);
                        acc(&mut adj, a, ga);
                    }
                    if rg(b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, val(a), true, &g, false, &mut gb, 0.0);
                        acc(&mut adj, b, gb);
                    }
                }
                &Op::Affine(x, w, b) => {
                    let sw = nodes[w].value.shape();
                    let (k, n) = (sw[0], sw[1]);
                    let m = nodes[x].value.rows();
                    if rg(x) {
                        let mut gx = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, val(w), true, &mut gx, 0.0);
                        acc(&mut adj, x, gx);
                    }
                    if rg(w) {
                        let mut gw = vec![0.0; k * n];
                        gemm(k, m, n, val(x), true, &g, false, &mut gw, 0.0);
                        acc(&mut adj, w, gw);
                    }
                    if rg(b) {
                        acc(&mut adj, b, reduce_cyclic(&g, n));
                    }
                }
                &Op::Sin(a) => {
                    let d = val(a);
                    acc(&mut adj, a, g.iter().zip(d).map(|(gk, x)| gk * x.cos()).collect());
                }
                &Op::Cos(a) => {
                    let d = val(a);
                    acc(&mut adj, a, g.iter().zip(d).map(|(gk, x)| -gk * x.sin()).collect());
                }
                &Op::Exp(a) => {
                    let out = node.value.data();
                    acc(&mut adj, a, g.iter().zip(out).map(|(gk, y)| gk * y).collect());
                }
                &Op::Log(a) => {
                    let d = val(a);
                    acc(&mut adj, a, g.iter().zip(d).map(|(gk, x)| gk / x).collect());
                }
                &Op::Silu(a) => {
                    let d = val(a);
                    let ga = g
                        .iter()
                        .zip(d)
                        .map(|(gk, &x)| {
                            let s = sigmoid(x);
                            gk * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    acc(&mut adj, a, ga);
                }
                &Op::Square(a) => {
                    let d = val(a);
                    acc(&mut adj, a, g.iter().zip(d).map(|(gk, x)| 2.0 * gk * x).collect());
                }
                &Op::Sum(a) => {
                    acc(&mut adj, a, vec![g[0]; val(a).len()]);
                }
                &Op::Mean(a) => {
                    let n = val(a).len();
                    acc(&mut adj, a, vec![g[0] / n as f64; n]);
                }
                Op::Concat { parts, axis } => {
                    let axis = *axis;
                    let (outer, inner) = axis_split(node.value.shape(), axis);
                    let total = node.value.shape()[axis];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.shape()[axis];
                        if rg(p) {
                            let mut gp = Vec::with_capacity(outer * w * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gp.extend_from_slice(&g[base..base + w * inner]);
                            }
                            acc(&mut adj, p, gp);
                        }
                        offset += w;
                    }
                }
                &Op::Slice { src, axis, start } => {
                    let s = nodes[src].value.shape();
                    let (outer, inner) = axis_split(s, axis);
                    let len = node.value.shape()[axis];
                    let mut gs = vec![0.0; val(src).len()];
                    for o in 0..outer {
                        let dst = (o * s[axis] + start) * inner;
                        let from = o * len * inner;
                        gs[dst..dst + len * inner].copy_from_slice(&g[from..from + len * inner]);
                    }
                    acc(&mut adj, src, gs);
                }
                &Op::Reshape(a) => acc(&mut adj, a, g),
            }
        }
        Ok(())
    }
}
