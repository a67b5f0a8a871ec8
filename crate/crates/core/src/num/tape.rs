//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Tape`] records each operation as a node holding the forward value and the
//! handles of its parents. Nodes are appended in execution order, so the
//! record is already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep. Every operation validates shapes up front and checks its
//! output for NaN/Inf, failing fast instead of letting poison propagate.
//!
//! One tape owns one training step: build the loss, call `backward` (which
//! consumes the tape), apply the gradients, start a fresh tape.

use crate::error::NumError;
use crate::num::Tensor;
use crate::util::uniform01;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// How the second operand of an elementwise binary op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Same shape.
    None,
    /// b is 1 x c, repeated over rows of a.
    Row,
    /// b is r x 1, repeated over columns of a.
    Col,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize, bc: Broadcast },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize, bc: Broadcast },
    Div { a: usize, b: usize },
    OneMinus { a: usize },
    Scale { a: usize, k: f64 },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    SoftmaxRows { a: usize },
    LogSumExpRows { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    SelectRows { a: usize, rows: Vec<usize> },
    SliceCols { a: usize, start: usize, end: usize },
    RepeatRows { a: usize },
    Transpose { a: usize },
    RowMax { a: usize, argmax: Vec<usize> },
    SumAll { a: usize },
    Dropout { a: usize, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient tape. See module docs.
pub struct Tape {
    id: u64,
    seed: u64,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Tape::backward`], addressable by the original vars.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or None if the loss does not depend
    /// on it.
    pub fn get(&self, v: Var) -> Result<Option<&Tensor>, NumError> {
        if v.tape != self.tape {
            return Err(NumError::DetachedVar);
        }
        Ok(self.grads[v.idx].as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros for unreached vars.
    pub fn get_or_zeros(&self, v: Var) -> Result<Tensor, NumError> {
        if v.tape != self.tape {
            return Err(NumError::DetachedVar);
        }
        Ok(match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.idx]),
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// A tape whose stochastic ops (dropout) draw from a stream seeded here.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            seed,
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Leaves accumulate gradients but have no
    /// parents.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, NumError> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    fn check(&self, v: Var) -> Result<(), NumError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NumError::DetachedVar);
        }
        Ok(())
    }

    fn push(&mut self, opname: &'static str, value: Tensor, op: Op) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: opname });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.nodes[a.idx].value.dims2()?;
        let (k2, n) = self.nodes[b.idx].value.dims2()?;
        if k != k2 {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_vals(&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        self.push("matmul", out, Op::MatMul { a: a.idx, b: b.idx })
    }

    fn binary_broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<Broadcast, NumError> {
        let sa = self.nodes[a.idx].value.shape();
        let sb = self.nodes[b.idx].value.shape();
        if sa == sb {
            return Ok(Broadcast::None);
        }
        if let ([r, c], [br, bc]) = (sa, sb) {
            if *br == 1 && bc == c && *r != 1 {
                return Ok(Broadcast::Row);
            }
            if *bc == 1 && br == r && *c != 1 {
                return Ok(Broadcast::Col);
            }
        }
        Err(NumError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    /// Elementwise sum; `b` may also be a 1 x c row (bias) or r x 1 column,
    /// broadcast across `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        let bc = self.binary_broadcast("add", a, b)?;
        let out = zip_broadcast(
            &self.nodes[a.idx].value,
            &self.nodes[b.idx].value,
            bc,
            |x, y| x + y,
        );
        self.push("add", out, Op::Add { a: a.idx, b: b.idx, bc })
    }

    /// Elementwise difference, equal shapes only.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a.idx].value.shape() != self.nodes[b.idx].value.shape() {
            return Err(NumError::ShapeMismatch {
                op: "sub",
                lhs: self.nodes[a.idx].value.shape().to_vec(),
                rhs: self.nodes[b.idx].value.shape().to_vec(),
            });
        }
        let out = zip_broadcast(
            &self.nodes[a.idx].value,
            &self.nodes[b.idx].value,
            Broadcast::None,
            |x, y| x - y,
        );
        self.push("sub", out, Op::Sub { a: a.idx, b: b.idx })
    }

    /// Hadamard product; `b` may be a broadcast row or column.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        let bc = self.binary_broadcast("mul", a, b)?;
        let out = zip_broadcast(
            &self.nodes[a.idx].value,
            &self.nodes[b.idx].value,
            bc,
            |x, y| x * y,
        );
        self.push("mul", out, Op::Mul { a: a.idx, b: b.idx, bc })
    }

    /// Elementwise quotient, equal shapes only.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a.idx].value.shape() != self.nodes[b.idx].value.shape() {
            return Err(NumError::ShapeMismatch {
                op: "div",
                lhs: self.nodes[a.idx].value.shape().to_vec(),
                rhs: self.nodes[b.idx].value.shape().to_vec(),
            });
        }
        let out = zip_broadcast(
            &self.nodes[a.idx].value,
            &self.nodes[b.idx].value,
            Broadcast::None,
            |x, y| x / y,
        );
        self.push("div", out, Op::Div { a: a.idx, b: b.idx })
    }

    /// 1 - a, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let out = map_vals(&self.nodes[a.idx].value, |x| 1.0 - x);
        self.push("one_minus", out, Op::OneMinus { a: a.idx })
    }

    /// a * k for a compile-time-known constant k.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, NumError> {
        self.check(a)?;
        let out = map_vals(&self.nodes[a.idx].value, |x| x * k);
        self.push("scale", out, Op::Scale { a: a.idx, k })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let out = map_vals(&self.nodes[a.idx].value, sigmoid_scalar);
        self.push("sigmoid", out, Op::Sigmoid { a: a.idx })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let out = map_vals(&self.nodes[a.idx].value, f64::tanh);
        self.push("tanh", out, Op::Tanh { a: a.idx })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let out = map_vals(&self.nodes[a.idx].value, f64::exp);
        self.push("exp", out, Op::Exp { a: a.idx })
    }

    /// Row-wise softmax of a rank-2 tensor. `mask`, if given, marks entries
    /// that participate; masked-out entries get probability zero. A row with
    /// every entry masked out is an error.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NumError> {
        self.check(a)?;
        let val = &self.nodes[a.idx].value;
        let (r, c) = val.dims2()?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(NumError::LengthMismatch {
                    op: "softmax_rows mask",
                    len: m.len(),
                    shape: vec![r, c],
                });
            }
        }
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = val.row_slice(i);
            let keep = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(j) {
                    mx = mx.max(row[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(NumError::FullyMaskedRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out.set2(i, j, e);
                    sum += e;
                }
            }
            for j in 0..c {
                out.set2(i, j, out.at2(i, j) / sum);
            }
        }
        self.push("softmax_rows", out, Op::SoftmaxRows { a: a.idx })
    }

    /// Row-wise log(sum(exp(x))), computed stably; result is r x 1.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let val = &self.nodes[a.idx].value;
        let (r, c) = val.dims2()?;
        if c == 0 {
            return Err(NumError::Empty {
                op: "logsumexp_rows",
            });
        }
        let mut out = Tensor::zeros(&[r, 1]);
        for i in 0..r {
            let row = val.row_slice(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            out.set2(i, 0, mx + sum.ln());
        }
        self.push("logsumexp_rows", out, Op::LogSumExpRows { a: a.idx })
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::Empty { op: "concat" });
        }
        for &p in parts {
            self.check(p)?;
        }
        if axis > 1 {
            return Err(NumError::BadShape {
                op: "concat",
                expected: "axis 0 or 1",
                got: vec![axis],
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| self.nodes[p.idx].value.dims2())
            .collect::<Result<_, _>>()?;
        let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
        for &(r, c) in &dims {
            let other = if axis == 0 { c } else { r };
            if other != fixed {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![dims[0].0, dims[0].1],
                    rhs: vec![r, c],
                });
            }
        }
        let out = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut t = Tensor::zeros(&[rows, fixed]);
            let mut off = 0;
            for &p in parts {
                let v = &self.nodes[p.idx].value;
                t.data_mut()[off..off + v.numel()].copy_from_slice(v.data());
                off += v.numel();
            }
            t
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let rows = fixed;
            let mut t = Tensor::zeros(&[rows, cols]);
            let mut coff = 0;
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                let v = &self.nodes[p.idx].value;
                for i in 0..rows {
                    for j in 0..c {
                        t.set2(i, coff + j, v.at2(i, j));
                    }
                }
                coff += c;
            }
            t
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.idx).collect(),
                axis,
            },
        )
    }

    /// Gather the given rows (indices may repeat).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumError> {
        self.check(a)?;
        let (r, c) = self.nodes[a.idx].value.dims2()?;
        for &i in rows {
            if i >= r {
                return Err(NumError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    extent: r,
                });
            }
        }
        let mut out = Tensor::zeros(&[rows.len(), c]);
        for (oi, &i) in rows.iter().enumerate() {
            let src = self.nodes[a.idx].value.row_slice(i).to_vec();
            out.data_mut()[oi * c..(oi + 1) * c].copy_from_slice(&src);
        }
        self.push(
            "select_rows",
            out,
            Op::SelectRows {
                a: a.idx,
                rows: rows.to_vec(),
            },
        )
    }

    /// Columns [start, end) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        self.check(a)?;
        let (r, c) = self.nodes[a.idx].value.dims2()?;
        if start > end || end > c {
            return Err(NumError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                extent: c,
            });
        }
        let mut out = Tensor::zeros(&[r, end - start]);
        for i in 0..r {
            for j in start..end {
                out.set2(i, j - start, self.nodes[a.idx].value.at2(i, j));
            }
        }
        self.push(
            "slice_cols",
            out,
            Op::SliceCols {
                a: a.idx,
                start,
                end,
            },
        )
    }

    /// Tile a 1 x c row vector into n identical rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, NumError> {
        self.check(a)?;
        let (r, c) = self.nodes[a.idx].value.dims2()?;
        if r != 1 {
            return Err(NumError::BadShape {
                op: "repeat_rows",
                expected: "a 1 x c row vector",
                got: vec![r, c],
            });
        }
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let src = self.nodes[a.idx].value.row_slice(0).to_vec();
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&src);
        }
        self.push("repeat_rows", out, Op::RepeatRows { a: a.idx })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let (r, c) = self.nodes[a.idx].value.dims2()?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.set2(j, i, self.nodes[a.idx].value.at2(i, j));
            }
        }
        self.push("transpose", out, Op::Transpose { a: a.idx })
    }

    /// Row-wise maximum, r x 1. Ties resolve to the first maximal column, and
    /// the gradient flows only to that entry.
    pub fn row_max(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let (r, c) = self.nodes[a.idx].value.dims2()?;
        if c == 0 {
            return Err(NumError::Empty { op: "row_max" });
        }
        let mut out = Tensor::zeros(&[r, 1]);
        let mut argmax = vec![0usize; r];
        for i in 0..r {
            let row = self.nodes[a.idx].value.row_slice(i);
            let (mut bj, mut bv) = (0usize, row[0]);
            for (j, &x) in row.iter().enumerate().skip(1) {
                if x > bv {
                    bv = x;
                    bj = j;
                }
            }
            out.set2(i, 0, bv);
            argmax[i] = bj;
        }
        self.push("row_max", out, Op::RowMax { a: a.idx, argmax })
    }

    /// Sum of all elements as a 1 x 1 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let s: f64 = self.nodes[a.idx].value.data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { a: a.idx })
    }

    /// Inverted dropout with keep probability 1 - rate; identity when rate
    /// is 0. Mask entries are 0 or 1/(1-rate), drawn from the tape's seed.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var, NumError> {
        self.check(a)?;
        if rate == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::BadShape {
                op: "dropout",
                expected: "rate in [0, 1)",
                got: vec![],
            });
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[a.idx].value.numel())
            .map(|_| {
                if uniform01(&mut self.rng) < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let mut out = self.nodes[a.idx].value.clone();
        for (x, m) in out.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push("dropout", out, Op::Dropout { a: a.idx, mask })
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape; read any values
    /// you still need before calling this.
    pub fn backward(self, loss: Var) -> Result<Gradients, NumError> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(NumError::DetachedVar);
        }
        if self.nodes[loss.idx].value.numel() != 1 {
            return Err(NumError::NonScalarLoss {
                shape: self.nodes[loss.idx].value.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::ones(self.nodes[loss.idx].value.shape()));

        for idx in (0..=loss.idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let da = matmul_nt(&g, bv); // g . b^T
                    let db = matmul_tn(av, &g); // a^T . g
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b, bc } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, reduce_broadcast(&g, *bc));
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    let mut neg = g.clone();
                    neg.scale_in_place(-1.0);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul { a, b, bc } => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    // d/da = g ⊙ broadcast(b)
                    let da = zip_broadcast(&g, bv, *bc, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    // d/db = reduce(g ⊙ a) over the broadcast extent
                    let ga = {
                        let mut t = g.clone();
                        for (x, y) in t.data_mut().iter_mut().zip(av.data()) {
                            *x *= y;
                        }
                        t
                    };
                    accumulate(&mut grads, *b, reduce_broadcast(&ga, *bc));
                }
                Op::Div { a, b } => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(bv.data()) {
                        *x /= y;
                    }
                    accumulate(&mut grads, *a, da);
                    let mut db = g.clone();
                    for ((x, num), den) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *x *= -num / (den * den);
                    }
                    accumulate(&mut grads, *b, db);
                }
                Op::OneMinus { a } => {
                    let mut da = g.clone();
                    da.scale_in_place(-1.0);
                    accumulate(&mut grads, *a, da);
                }
                Op::Scale { a, k } => {
                    let mut da = g.clone();
                    da.scale_in_place(*k);
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid { a } => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for (x, s) in da.data_mut().iter_mut().zip(y.data()) {
                        *x *= s * (1.0 - s);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh { a } => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for (x, t) in da.data_mut().iter_mut().zip(y.data()) {
                        *x *= 1.0 - t * t;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp { a } => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for (x, e) in da.data_mut().iter_mut().zip(y.data()) {
                        *x *= e;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows { a } => {
                    // Per row: da = y ⊙ (g - <g, y>). Masked entries have
                    // y = 0 and therefore zero gradient automatically.
                    let y = &node.value;
                    let (r, c) = y.dims2()?;
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            da.set2(i, j, yr[j] * (gr[j] - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSumExpRows { a } => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value; // r x 1
                    let (r, c) = x.dims2()?;
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let gi = g.at2(i, 0);
                        for j in 0..c {
                            da.set2(i, j, gi * (x.at2(i, j) - y.at2(i, 0)).exp());
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut off = 0;
                        for &p in parts {
                            let (r, c) = self.nodes[p].value.dims2()?;
                            let mut dp = Tensor::zeros(&[r, c]);
                            dp.data_mut()
                                .copy_from_slice(&g.data()[off..off + r * c]);
                            off += r * c;
                            accumulate(&mut grads, p, dp);
                        }
                    } else {
                        let mut coff = 0;
                        for &p in parts {
                            let (r, c) = self.nodes[p].value.dims2()?;
                            let mut dp = Tensor::zeros(&[r, c]);
                            for i in 0..r {
                                for j in 0..c {
                                    dp.set2(i, j, g.at2(i, coff + j));
                                }
                            }
                            coff += c;
                            accumulate(&mut grads, p, dp);
                        }
                    }
                }
                Op::SelectRows { a, rows } => {
                    let (r, c) = self.nodes[*a].value.dims2()?;
                    let mut da = Tensor::zeros(&[r, c]);
                    for (oi, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            let cur = da.at2(i, j);
                            da.set2(i, j, cur + g.at2(oi, j));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols { a, start, end } => {
                    let (r, c) = self.nodes[*a].value.dims2()?;
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        for j in *start..*end {
                            da.set2(i, j, g.at2(i, j - start));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RepeatRows { a } => {
                    let (gr, gc) = g.dims2()?;
                    let mut da = Tensor::zeros(&[1, gc]);
                    for i in 0..gr {
                        for j in 0..gc {
                            let cur = da.at2(0, j);
                            da.set2(0, j, cur + g.at2(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose { a } => {
                    let (gr, gc) = g.dims2()?;
                    let mut da = Tensor::zeros(&[gc, gr]);
                    for i in 0..gr {
                        for j in 0..gc {
                            da.set2(j, i, g.at2(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowMax { a, argmax } => {
                    let (r, c) = self.nodes[*a].value.dims2()?;
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        da.set2(i, argmax[i], g.at2(i, 0));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll { a } => {
                    let gv = g.data()[0];
                    let mut da = Tensor::ones(self.nodes[*a].value.shape());
                    da.scale_in_place(gv);
                    accumulate(&mut grads, *a, da);
                }
                Op::Dropout { a, mask } => {
                    let mut da = g.clone();
                    for (x, m) in da.data_mut().iter_mut().zip(mask) {
                        *x *= m;
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            grads[idx] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(g) => g.add_in_place(&delta).expect("gradient shape drift"),
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map_vals(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    for x in out.data_mut() {
        *x = f(*x);
    }
    out
}

fn zip_broadcast(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    match bc {
        Broadcast::None => {
            for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                *x = f(*x, *y);
            }
        }
        Broadcast::Row => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            for i in 0..r {
                for j in 0..c {
                    out.set2(i, j, f(a.at2(i, j), b.at2(0, j)));
                }
            }
        }
        Broadcast::Col => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            for i in 0..r {
                for j in 0..c {
                    out.set2(i, j, f(a.at2(i, j), b.at2(i, 0)));
                }
            }
        }
    }
    out
}

/// Collapse a full-shaped gradient back to the broadcast operand's shape.
fn reduce_broadcast(g: &Tensor, bc: Broadcast) -> Tensor {
    match bc {
        Broadcast::None => g.clone(),
        Broadcast::Row => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            let mut out = Tensor::zeros(&[1, c]);
            for i in 0..r {
                for j in 0..c {
                    let cur = out.at2(0, j);
                    out.set2(0, j, cur + g.at2(i, j));
                }
            }
            out
        }
        Broadcast::Col => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            let mut out = Tensor::zeros(&[r, 1]);
            for i in 0..r {
                for j in 0..c {
                    let cur = out.at2(i, 0);
                    out.set2(i, 0, cur + g.at2(i, j));
                }
            }
            out
        }
    }
}

fn matmul_vals(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let aip = a.at2(i, p);
            if aip == 0.0 {
                continue;
            }
            let brow = b.row_slice(p);
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// a . b^T
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..n {
            let brow = b.row_slice(j);
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out.set2(i, j, s);
        }
    }
    out
}

/// a^T . b
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    for p in 0..k {
        let arow = a.row_slice(p);
        let brow = b.row_slice(p);
        for i in 0..m {
            let aip = arow[i];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}
