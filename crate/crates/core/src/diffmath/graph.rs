//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a single-element output walks the tape in reverse
//! and returns exact analytic gradients for every node that requires them.
//!
//! Nodes created with [`Graph::constant`] never receive gradients, and any
//! node whose inputs are all constant is itself constant, so frozen parts of
//! a model cost only their forward pass.
//!
//! Broadcasting is explicit-rank: binary operands must have equal rank and
//! each axis must either match or be 1 on one side.

use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    TransposeLast(Var),
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    MaskedSoftmax {
        scores: Var,
        mask: Var,
        exps: Vec<T>,
        norms: Vec<T>,
    },
    LogSoftmax {
        x: Var,
        avail: Option<Vec<bool>>,
    },
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    GatherLast {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Stack {
        parts: Vec<Var>,
        axis: usize,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Minimum {
        a: Var,
        b: Var,
    },
    Huber {
        x: Var,
        delta: T,
    },
    StraightThrough {
        soft: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. One graph per forward/backward evaluation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SOFTMAX_EXP_CAP: f64 = 50.0;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(format!("rank mismatch: {a:?} vs {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// Element strides of `shape` viewed inside `out`; broadcast axes get 0.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_bcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += last;
        // advance the outer counter
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * counter[d];
            ib -= sb[d] * counter[d];
            counter[d] = 0;
        }
    }
}

#[inline]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let c = T::c(0.044715);
    let half = T::c(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x);
    (y, dy)
}

/// Outer/axis/inner sizes for axis-wise select and stack.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Named leaf; names are reported back by [`Graph::params`].
    pub fn param(&mut self, name: &str, t: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.leaf(t, requires_grad);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `b` of rank 2 is shared across all leading axes of `a`; otherwise
    /// both operands must have identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                av,
                (k as isize, 1),
                bv,
                (n as isize, 1),
                T::zero(),
                &mut out,
                (n as isize, 1),
            );
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return shape_err(format!(
                    "batched matmul leading axes differ: {sa:?} x {sb:?}"
                ));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out_shape = s.clone();
        out_shape.swap(s.len() - 2, s.len() - 1);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (b, chunk) in src.chunks(m * n.max(1)).enumerate() {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = chunk[i * n + j];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::TransposeLast(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); out_shape.iter().product()];
            let stra = bcast_strides(&sa, &out_shape);
            let strb = bcast_strides(&sb, &out_shape);
            for_each_bcast(&out_shape, &stra, &strb, |o, i, j| out[o] = f(av[i], bv[j]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Huber penalty: `x^2/2` inside `[-delta, delta]`, linear outside.
    pub fn huber(&mut self, x: Var, delta: T) -> Var {
        let half = T::c(0.5);
        self.unary(
            x,
            |v| {
                if v.abs() <= delta {
                    half * v * v
                } else {
                    delta * (v.abs() - half * delta)
                }
            },
            Op::Huber { x, delta },
        )
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "minimum: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x.min(y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Minimum { a, b }, rg))
    }

    /// Forward value `hard + (soft - soft_ref)`; backward is the identity
    /// onto `soft`. With `soft == soft_ref` the value is exactly `hard`.
    pub fn straight_through(
        &mut self,
        hard: &Tensor<T>,
        soft: Var,
        soft_ref: &Tensor<T>,
    ) -> Result<Var> {
        let s = self.value(soft);
        if hard.shape() != s.shape() || soft_ref.shape() != s.shape() {
            return shape_err(format!(
                "straight-through operands differ: hard {:?}, soft {:?}, ref {:?}",
                hard.shape(),
                s.shape(),
                soft_ref.shape()
            ));
        }
        let out: Vec<T> = hard
            .data()
            .iter()
            .zip(s.data())
            .zip(soft_ref.data())
            .map(|((&h, &x), &r)| h + (x - r))
            .collect();
        let rg = self.rg(soft);
        Ok(self.push(
            Tensor::new(hard.shape(), out)?,
            Op::StraightThrough { soft },
            rg,
        ))
    }

    // ---- normalisation --------------------------------------------------

    /// Normalises the last axis to zero mean and unit variance.
    ///
    /// The denominator is `sqrt(var + 1e-5)`, so a constant row maps to 0.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0".into()))?;
        if d == 0 {
            return shape_err("layer_norm over empty axis");
        }
        let eps = T::c(1e-5);
        let dn = T::c(d as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / d);
        for (row, o) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for (y, &v) in o.iter_mut().zip(row) {
                *y = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Softmax over the last axis where `mask` multiplies the unnormalised
    /// weights: `p_j = m_j e^{s_j} / sum_l m_l e^{s_l}`.
    ///
    /// For a binary mask, masked entries are exactly 0 and the rest sum to 1.
    /// The mask may itself carry gradients (straight-through edges).
    pub fn masked_softmax(&mut self, scores: Var, mask: Var) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s != self.shape(mask) {
            return shape_err(format!(
                "masked_softmax: scores {s:?} vs mask {:?}",
                self.shape(mask)
            ));
        }
        let l = *s
            .last()
            .ok_or_else(|| Error::Shape("masked_softmax on rank-0".into()))?;
        let sv = self.value(scores).data();
        let mv = self.value(mask).data();
        let mut out = vec![T::zero(); sv.len()];
        let mut exps = vec![T::zero(); sv.len()];
        let mut norms = Vec::with_capacity(sv.len() / l.max(1));
        let cap = T::c(SOFTMAX_EXP_CAP);
        for (row, ((sr, mr), (or, er))) in sv
            .chunks(l)
            .zip(mv.chunks(l))
            .zip(out.chunks_mut(l).zip(exps.chunks_mut(l)))
            .enumerate()
        {
            let mut max = T::neg_infinity();
            for (&x, &m) in sr.iter().zip(mr) {
                if m != T::zero() && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::DegenerateRow { row });
            }
            let mut z = T::zero();
            for j in 0..l {
                er[j] = (sr[j] - max).min(cap).exp();
                if mr[j] != T::zero() {
                    or[j] = mr[j] * er[j];
                    z = z + or[j];
                }
            }
            if z == T::zero() || !z.is_finite() {
                return Err(Error::DegenerateRow { row });
            }
            for v in or.iter_mut() {
                *v = *v / z;
            }
            norms.push(z);
        }
        let rg = self.rg(scores) || self.rg(mask);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::MaskedSoftmax {
                scores,
                mask,
                exps,
                norms,
            },
            rg,
        ))
    }

    /// Log-softmax over the last axis. Unavailable entries (where `avail` is
    /// false) are excluded from the normaliser and report 0.
    pub fn log_softmax(&mut self, x: Var, avail: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let l = *s
            .last()
            .ok_or_else(|| Error::Shape("log_softmax on rank-0".into()))?;
        let xv = self.value(x).data();
        if let Some(a) = avail {
            if a.len() != xv.len() {
                return shape_err("log_softmax availability mask has wrong length");
            }
        }
        let mut out = vec![T::zero(); xv.len()];
        for (row, (xr, or)) in xv.chunks(l).zip(out.chunks_mut(l)).enumerate() {
            let ok = |j: usize| avail.is_none_or(|a| a[row * l + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in xr.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::DegenerateRow { row });
            }
            let z: T = (0..l).filter(|&j| ok(j)).map(|j| (xr[j] - max).exp()).sum();
            let lz = z.ln() + max;
            for j in 0..l {
                or[j] = if ok(j) { xr[j] - lz } else { T::zero() };
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::LogSoftmax {
                x,
                avail: avail.map(<[bool]>::to_vec),
            },
            rg,
        ))
    }

    // ---- indexing -------------------------------------------------------

    /// Row lookup: `out[..., :] = table[idx[...], :]`, shaped `idx_shape + [d]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize], idx_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return shape_err("embedding table must be rank 2");
        }
        if idx_shape.iter().product::<usize>() != idx.len() {
            return shape_err("embedding index shape does not match index count");
        }
        let (rows, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Lookup { index: i, rows });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = idx_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks one entry of the last axis per leading position.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let l = *s
            .last()
            .ok_or_else(|| Error::Shape("gather on rank-0".into()))?;
        let rows = self.value(x).numel() / l.max(1);
        if idx.len() != rows {
            return shape_err(format!("gather expects {rows} indices, got {}", idx.len()));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= l {
                return Err(Error::Lookup { index: i, rows: l });
            }
            out.push(xv[r * l + i]);
        }
        let shape = if s.len() > 1 {
            s[..s.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return shape_err(format!("select axis {axis} index {index} on {s:?}"));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            out.extend_from_slice(&xv[base..base + inner]);
        }
        let mut shape = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Select { x, axis, index }, rg))
    }

    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let s = self.shape(*first).to_vec();
        if axis > s.len() {
            return shape_err("stack axis out of range");
        }
        if parts.iter().any(|p| self.shape(*p) != s.as_slice()) {
            return shape_err("stack operands differ in shape");
        }
        let mut shape = s.clone();
        shape.insert(axis, parts.len());
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = vec![T::zero(); outer * n * inner];
        for (k, p) in parts.iter().enumerate() {
            let pv = self.value(*p).data();
            for o in 0..outer {
                let dst = (o * n + k) * inner;
                out[dst..dst + inner].copy_from_slice(&pv[o * inner..(o + 1) * inner]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Stack {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if broadcast_shape(&s, shape)? != shape {
            return shape_err(format!("cannot broadcast {s:?} to {shape:?}"));
        }
        if s == shape {
            return Ok(x);
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); shape.iter().product()];
        let sx = bcast_strides(&s, shape);
        let zero = vec![0; shape.len()];
        for_each_bcast(shape, &sx, &zero, |o, i, _| out[o] = xv[i]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::BroadcastTo(x), rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.sum() / T::c(t.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let l = *s
            .last()
            .ok_or_else(|| Error::Shape("sum_last on rank-0".into()))?;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(l.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        let shape = if s.len() > 1 {
            s[..s.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumLast(x), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    fn backprop(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (ki, ni) = (k as isize, n as isize);
                if sb.len() == 2 {
                    let rows: usize = sa[..sa.len() - 1].iter().product();
                    if let Some(ga) = self.acc(grads, *a) {
                        // ga += g * b^T
                        T::gemm(
                            rows,
                            n,
                            k,
                            T::one(),
                            gd,
                            (ni, 1),
                            bv,
                            (1, ni),
                            T::one(),
                            ga,
                            (ki, 1),
                        );
                    }
                    if let Some(gb) = self.acc(grads, *b) {
                        // gb += a^T * g
                        T::gemm(
                            k,
                            rows,
                            n,
                            T::one(),
                            av,
                            (1, ki),
                            gd,
                            (ni, 1),
                            T::one(),
                            gb,
                            (ni, 1),
                        );
                    }
                } else {
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    let (mk, kn, mn) = (m * k, k * n, m * n);
                    if let Some(ga) = self.acc(grads, *a) {
                        for i in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                &gd[i * mn..(i + 1) * mn],
                                (ni, 1),
                                &bv[i * kn..(i + 1) * kn],
                                (1, ni),
                                T::one(),
                                &mut ga[i * mk..(i + 1) * mk],
                                (ki, 1),
                            );
                        }
                    }
                    if let Some(gb) = self.acc(grads, *b) {
                        for i in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &av[i * mk..(i + 1) * mk],
                                (1, ki),
                                &gd[i * mn..(i + 1) * mn],
                                (ni, 1),
                                T::one(),
                                &mut gb[i * kn..(i + 1) * kn],
                                (ni, 1),
                            );
                        }
                    }
                }
            }
            Op::TransposeLast(a) => {
                let s = self.shape(*a).to_vec();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for b in 0..ga.len() / (m * n).max(1) {
                        let base = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                ga[base + i * n + j] = ga[base + i * n + j] + gd[base + j * m + i];
                            }
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let same = sa == sb;
                let stra = bcast_strides(&sa, out_shape);
                let strb = bcast_strides(&sb, out_shape);
                if let Some(ga) = self.acc(grads, *a) {
                    let f = |o: usize, j: usize| match kind {
                        BinKind::Add | BinKind::Sub => gd[o],
                        BinKind::Mul => gd[o] * bv[j],
                    };
                    if same {
                        for (o, g) in ga.iter_mut().enumerate().take(gd.len()) {
                            *g = *g + f(o, o);
                        }
                    } else {
                        for_each_bcast(out_shape, &stra, &strb, |o, i, j| ga[i] = ga[i] + f(o, j));
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let f = |o: usize, i: usize| match kind {
                        BinKind::Add => gd[o],
                        BinKind::Sub => -gd[o],
                        BinKind::Mul => gd[o] * av[i],
                    };
                    if same {
                        for (o, g) in gb.iter_mut().enumerate().take(gd.len()) {
                            *g = *g + f(o, o);
                        }
                    } else {
                        for_each_bcast(out_shape, &stra, &strb, |o, i, j| gb[j] = gb[j] + f(o, i));
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, &b) in gx.iter_mut().zip(gd) {
                        *a = *a + b * *c;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough { soft: x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, &b) in gx.iter_mut().zip(gd) {
                        *a = *a + b;
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let two = T::c(2.0);
                    for ((a, &b), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *a = *a + two * v * b;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &v) in gx.iter_mut().zip(gd).zip(y) {
                        *a = *a + b * v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *a = *a + b * gelu_parts(v).1;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *a = *a + b;
                        }
                    }
                }
            }
            Op::Huber { x, delta } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        let d = if v.abs() <= *delta {
                            v
                        } else {
                            *delta * v.signum()
                        };
                        *a = *a + b * d;
                    }
                }
            }
            Op::Minimum { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..gd.len() {
                        if av[i] <= bv[i] {
                            ga[i] = ga[i] + gd[i];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gd.len() {
                        if av[i] > bv[i] {
                            gb[i] = gb[i] + gd[i];
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let dn = T::c(d as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &rs) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, yr) = (&gd[span.clone()], &y[span.clone()]);
                        let mg = gr.iter().copied().sum::<T>() / dn;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for ((o, &gv), &yv) in gx[span].iter_mut().zip(gr).zip(yr) {
                            *o = *o + rs * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::MaskedSoftmax {
                scores,
                mask,
                exps,
                norms,
            } => {
                let l = *node.value.shape().last().unwrap_or(&1);
                let mut dots = Vec::with_capacity(norms.len());
                for r in 0..norms.len() {
                    let span = r * l..(r + 1) * l;
                    dots.push(
                        gd[span.clone()]
                            .iter()
                            .zip(&y[span])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>(),
                    );
                }
                if let Some(gs) = self.acc(grads, *scores) {
                    for (r, &c) in dots.iter().enumerate() {
                        for j in r * l..(r + 1) * l {
                            if y[j] != T::zero() {
                                gs[j] = gs[j] + y[j] * (gd[j] - c);
                            }
                        }
                    }
                }
                if let Some(gm) = self.acc(grads, *mask) {
                    for (r, (&c, &z)) in dots.iter().zip(norms).enumerate() {
                        for j in r * l..(r + 1) * l {
                            gm[j] = gm[j] + exps[j] * (gd[j] - c) / z;
                        }
                    }
                }
            }
            Op::LogSoftmax { x, avail } => {
                let l = *node.value.shape().last().unwrap_or(&1);
                if let Some(gx) = self.acc(grads, *x) {
                    let ok = |j: usize| avail.as_ref().is_none_or(|a| a[j]);
                    for r in 0..gd.len() / l.max(1) {
                        let span = r * l..(r + 1) * l;
                        let gsum: T = span.clone().filter(|&j| ok(j)).map(|j| gd[j]).sum();
                        for j in span {
                            if ok(j) {
                                gx[j] = gx[j] + gd[j] - y[j].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, idx } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] = gt[i * d + c] + gd[k * d + c];
                        }
                    }
                }
            }
            Op::GatherLast { x, idx } => {
                let l = *self.shape(*x).last().unwrap_or(&1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * l + i] = gx[r * l + i] + gd[r];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for a in gx.iter_mut() {
                        *a = *a + gd[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = gd[0] / T::c(gx.len().max(1) as f64);
                    for a in gx.iter_mut() {
                        *a = *a + c;
                    }
                }
            }
            Op::SumLast(x) => {
                let l = *self.shape(*x).last().unwrap_or(&1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (j, a) in gx.iter_mut().enumerate() {
                        *a = *a + gd[j / l];
                    }
                }
            }
            Op::BroadcastTo(x) => {
                let out_shape = node.value.shape();
                let sx = bcast_strides(self.shape(*x), out_shape);
                let zero = vec![0; out_shape.len()];
                if let Some(gx) = self.acc(grads, *x) {
                    for_each_bcast(out_shape, &sx, &zero, |o, i, _| gx[i] = gx[i] + gd[o]);
                }
            }
            Op::Select { x, axis, index } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let base = (o * n + index) * inner;
                        for c in 0..inner {
                            gx[base + c] = gx[base + c] + gd[o * inner + c];
                        }
                    }
                }
            }
            Op::Stack { parts, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                for (k, p) in parts.iter().enumerate() {
                    if let Some(gp) = self.acc(grads, *p) {
                        for o in 0..outer {
                            let src = (o * n + k) * inner;
                            for c in 0..inner {
                                gp[o * inner + c] = gp[o * inner + c] + gd[src + c];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_softmax_cases() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let m = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let p = g.masked_softmax(s, m).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = g.constant(t(&[1, 3], &[5.0, 100.0, 5.0]));
        let m = g.constant(t(&[1, 3], &[1.0, 0.0, 1.0]));
        let p = g.masked_softmax(s, m).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.0, 0.5]);

        let s = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let m = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let p = g.masked_softmax(s, m).unwrap();
        let pv = g.value(p).data();
        assert!((pv[0] - 0.2689).abs() < 1e-4 && (pv[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn masked_softmax_degenerate_row() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(
            g.masked_softmax(s, m),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn masked_entries_get_exactly_zero_score_gradient() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(t(&[1, 3], &[0.3, -1.0, 2.0]), true);
        let m = g.constant(t(&[1, 3], &[1.0, 0.0, 1.0]));
        let p = g.masked_softmax(s, m).unwrap();
        let w = g.constant(t(&[1, 3], &[1.0, 7.0, -2.0]));
        let l = g.mul(p, w).unwrap();
        let l = g.sum(l);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap().data()[1], 0.0);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        for c in [-3.0, 0.0, 7.5] {
            let x = g.constant(t(&[1, 3], &[c, c, c]));
            let y = g.layer_norm(x).unwrap();
            assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn gelu_zero_and_embedding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.gelu(x);
        assert_eq!(g.value(y).data(), &[0.0]);

        let table = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = g.embedding(table, &[1], &[1]).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0]);
        assert!(matches!(
            g.embedding(table, &[2], &[1]),
            Err(Error::Lookup { index: 2, rows: 2 })
        ));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0; 6]), true);
        let b = g.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(x, bad).is_err(), "rank promotion must be rejected");
    }

    #[test]
    fn straight_through_is_exactly_hard() {
        let mut g = Graph::<f64>::new();
        let soft = g.leaf(t(&[3], &[0.1, 0.7, 0.2]), true);
        let hard = t(&[3], &[0.0, 1.0, 0.0]);
        let reference = g.value(soft).clone();
        let st = g.straight_through(&hard, soft, &reference).unwrap();
        assert_eq!(g.value(st).data(), hard.data());
        let w = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let l = g.mul(st, w).unwrap();
        let l = g.sum(l);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(soft).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
