//! Reverse-mode autodiff over a linear tape.
//!
//! Nodes are appended in evaluation order, so a node's operands always have
//! smaller indices and the backward sweep is a single reverse pass. Parameter
//! nodes borrow their values from the [`ParamStore`]; nothing is copied.

use super::ops::{self, NormStats};
use super::params::{Grads, ParamStore};
use super::tensor::{matmul_raw, matmul_t_raw, t_matmul_raw, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Supervision for [`Graph::cross_entropy`].
#[derive(Debug, Clone)]
pub enum Targets<T: Real> {
    /// One class id per row.
    Hard(Vec<usize>),
    /// One target distribution per row, same shape as the logits.
    Soft(Tensor<T>),
}

enum Op<T: Real> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RelBias {
        table: Var,
        head: usize,
        clip: usize,
    },
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: Targets<T>,
        rows: Vec<usize>,
    },
}

struct Node<T: Real> {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

fn mat<T: Real>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::new(vec![rows, cols], data).expect("kernel output matches its shape")
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(idx)) => &self.params.by_index(*idx).1.value,
            _ => unreachable!("only parameter nodes are value-less"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self.params.require(name)?;
        if let Some(v) = self.param_vars[idx] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[idx] = Some(v);
        Ok(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_t {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let out = matmul_t_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(mat(m, n, out), Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.cols() != tb.cols() {
            return Err(Error::Shape(format!("add {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        Ok(self.push(mat(r, c, out), Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-C bias to every row of an R×C matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let tb = self.value(bias);
        if tb.len() != c {
            return Err(Error::Shape(format!("bias of length {} for {c} columns", tb.len())));
        }
        let b = tb.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, &v)| *o += v);
        }
        Ok(self.push(mat(r, c, out), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| v * s).collect();
        self.push(mat(r, c, out), Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if factor.len() != r * c {
            return Err(Error::Shape("mul_const factor length".into()));
        }
        let out = self.value(x).data().iter().zip(&factor).map(|(&v, &f)| v * f).collect();
        Ok(self.push(mat(r, c, out), Op::MulConst(x, factor), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| ops::gelu(v)).collect();
        self.push(mat(r, c, out), Op::Gelu(x), &[x])
    }

    /// Row softmax; columns with `keep[j] == false` get exactly zero weight.
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(k) = keep {
            if k.len() != c {
                return Err(Error::Shape(format!("softmax mask of {} for {c} columns", k.len())));
            }
        }
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::Numerical("non-finite input".into()));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            ops::softmax_in_place(row, keep);
        }
        Ok(self.push(mat(r, c, out), Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::Shape(format!("layer_norm over {c} columns")));
        }
        let (out, stats) = ops::layer_norm_raw(self.value(x).data(), c, g.data(), b.data(), T::of(eps));
        Ok(self.push(
            mat(r, c, out),
            Op::LayerNorm { x, gamma, beta, stats },
            &[x, gamma, beta],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + width > c || width == 0 {
            return Err(Error::Shape(format!("columns {start}..{} of {c}", start + width)));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + width]);
        }
        Ok(self.push(mat(r, width, out), Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(mat(r, total, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::Shape("concat_rows column counts differ".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c;
        Ok(self.push(mat(r, c, out), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `ids` of `table` (embedding lookup, row selection).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Shape("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row {bad} of a {r}-row table")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        Ok(self.push(mat(ids.len(), c, out), Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// `[lq×lk]` matrix with entry `table[head, clamp(j - i, -clip, clip) + clip]`.
    pub fn rel_bias(&mut self, table: Var, head: usize, clip: usize, lq: usize, lk: usize) -> Result<Var> {
        let (heads, width) = self.dims(table);
        if head >= heads || width != 2 * clip + 1 {
            return Err(Error::Shape(format!(
                "relative bias table {heads}x{width} for head {head}, clip {clip}"
            )));
        }
        let row = self.value(table).row(head);
        let mut out = Vec::with_capacity(lq * lk);
        for i in 0..lq {
            for j in 0..lk {
                out.push(row[rel_index(i, j, clip)]);
            }
        }
        Ok(self.push(mat(lq, lk, out), Op::RelBias { table, head, clip }, &[table]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            ops::log_softmax_in_place(row);
        }
        self.push(mat(r, c, out), Op::LogSoftmax(x), &[x])
    }

    /// `out[i] = x[i, cols[i]]`, as an R×1 column.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape(format!("pick {} entries from {r}x{c}", cols.len())));
        }
        let t = self.value(x);
        let out = cols.iter().enumerate().map(|(i, &j)| t.at(i, j)).collect();
        Ok(self.push(mat(r, 1, out), Op::Pick(x, cols.to_vec()), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(mat(1, 1, vec![m]), Op::Mean(x), &[x])
    }

    /// Mean cross entropy over the rows with `mask[i] == true` (all rows if no mask).
    pub fn cross_entropy(&mut self, logits: Var, target: Targets<T>, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if let Some(m) = mask {
            if m.len() != r {
                return Err(Error::Shape(format!("mask of {} for {r} rows", m.len())));
            }
        }
        match &target {
            Targets::Hard(ids) => {
                if ids.len() != r {
                    return Err(Error::Shape(format!("{} targets for {r} rows", ids.len())));
                }
                if let Some(&bad) = ids.iter().find(|&&t| t >= c) {
                    return Err(Error::Shape(format!("target class {bad} of {c}")));
                }
            }
            Targets::Soft(t) => {
                if t.rows() != r || t.cols() != c {
                    return Err(Error::Shape(format!("soft targets {:?} for {r}x{c} logits", t.shape())));
                }
            }
        }
        let rows: Vec<usize> = (0..r).filter(|&i| mask.is_none_or(|m| m[i])).collect();
        if rows.is_empty() {
            return Err(Error::Numerical("no supervised positions".into()));
        }
        let lt = self.value(logits);
        if !lt.is_finite() {
            return Err(Error::Numerical("non-finite input".into()));
        }
        let mut probs = vec![T::zero(); rows.len() * c];
        let mut total = T::zero();
        for (k, &i) in rows.iter().enumerate() {
            let mut logp = lt.row(i).to_vec();
            ops::log_softmax_in_place(&mut logp);
            match &target {
                Targets::Hard(ids) => total -= logp[ids[i]],
                Targets::Soft(t) => {
                    for (&tv, &lp) in t.row(i).iter().zip(&logp) {
                        if tv != T::zero() {
                            total -= tv * lp;
                        }
                    }
                }
            }
            for (p, lp) in probs[k * c..(k + 1) * c].iter_mut().zip(logp) {
                *p = lp.exp();
            }
        }
        let loss = total / T::of(rows.len() as f64);
        Ok(self.push(
            mat(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                probs,
                target,
                rows,
            },
            &[logits],
        ))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Grads::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, op: &Op<T>, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], out: &mut Grads<T>) {
        let me = self.nodes[i].value.as_ref();
        match op {
            Op::Input => {}
            Op::Param(idx) => match &mut out.per_param[*idx] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
                slot @ None => *slot = Some(g.to_vec()),
            },
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.nodes[a.0].needs_grad {
                    let da = matmul_t_raw(g, self.value(*b).data(), m, n, k);
                    add_into(self.slot(grads, *a), &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = t_matmul_raw(self.value(*a).data(), g, m, k, n);
                    add_into(self.slot(grads, *b), &db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.nodes[a.0].needs_grad {
                    let da = matmul_raw(g, self.value(*b).data(), m, n, k);
                    add_into(self.slot(grads, *a), &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = t_matmul_raw(g, self.value(*a).data(), m, n, k);
                    add_into(self.slot(grads, *b), &db);
                }
            }
            Op::Add(a, b) => {
                add_into(self.slot(grads, *a), g);
                add_into(self.slot(grads, *b), g);
            }
            Op::AddBias(x, b) => {
                add_into(self.slot(grads, *x), g);
                let c = self.dims(*x).1;
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::MulConst(x, f) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), &fv) in dx.iter_mut().zip(g).zip(f) {
                        *d += v * fv;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), xv) in dx.iter_mut().zip(g).zip(xv) {
                        *d += v * ops::gelu_grad(xv);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = me.expect("value").data();
                let c = self.dims(*x).1;
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let c = self.dims(*x).1;
                let gam = self.value(*gamma).data().to_vec();
                if let Some(dgam) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(c).zip(stats.xhat.chunks(c)) {
                        for j in 0..c {
                            dgam[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for grow in g.chunks(c) {
                        dbeta.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = T::of(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for (r, (grow, hrow)) in g.chunks(c).zip(stats.xhat.chunks(c)).enumerate() {
                        let mut sum = T::zero();
                        let mut sum_h = T::zero();
                        for j in 0..c {
                            dxhat[j] = grow[j] * gam[j];
                            sum += dxhat[j];
                            sum_h += dxhat[j] * hrow[j];
                        }
                        let is = stats.inv_std[r] / nf;
                        for j in 0..c {
                            dx[r * c + j] += is * (nf * dxhat[j] - sum - hrow[j] * sum_h);
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.dims(*x).1;
                let w = me.expect("value").cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, grow) in g.chunks(w).enumerate() {
                        let base = r * c + start;
                        dx[base..base + w].iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = me.expect("value").cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if let Some(dp) = self.slot(grads, p) {
                        for (r, drow) in dp.chunks_mut(w).enumerate() {
                            let base = r * total + offset;
                            drow.iter_mut().zip(&g[base..base + w]).for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(self.slot(grads, p), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::GatherRows(table, ids) => {
                let c = self.dims(*table).1;
                if let Some(dt) = self.slot(grads, *table) {
                    for (grow, &id) in g.chunks(c).zip(ids) {
                        dt[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::RelBias { table, head, clip } => {
                let width = self.dims(*table).1;
                let (lq, lk) = {
                    let t = me.expect("value");
                    (t.rows(), t.cols())
                };
                if let Some(dt) = self.slot(grads, *table) {
                    let base = head * width;
                    for qi in 0..lq {
                        for kj in 0..lk {
                            dt[base + rel_index(qi, kj, *clip)] += g[qi * lk + kj];
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = me.expect("value").data();
                let c = self.dims(*x).1;
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: T = grow.iter().copied().sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - yv.exp() * s;
                        }
                    }
                }
            }
            Op::Pick(x, cols) => {
                let c = self.dims(*x).1;
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &j) in cols.iter().enumerate() {
                        dx[r * c + j] += g[r];
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = g[0] / T::of(n as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
                rows,
            } => {
                let c = self.dims(*logits).1;
                let scale = g[0] / T::of(rows.len() as f64);
                if let Some(dx) = self.slot(grads, *logits) {
                    for (k, &r) in rows.iter().enumerate() {
                        let p = &probs[k * c..(k + 1) * c];
                        let drow = &mut dx[r * c..(r + 1) * c];
                        match target {
                            Targets::Hard(ids) => {
                                for j in 0..c {
                                    drow[j] += scale * p[j];
                                }
                                drow[ids[r]] -= scale;
                            }
                            Targets::Soft(t) => {
                                let trow = t.row(r);
                                let mass: T = trow.iter().copied().sum();
                                for j in 0..c {
                                    drow[j] += scale * (p[j] * mass - trow[j]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: Option<&mut Vec<T>>, src: &[T]) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
    }
}

pub(crate) fn rel_index(i: usize, j: usize, clip: usize) -> usize {
    let off = j as i64 - i as i64;
    (off.clamp(-(clip as i64), clip as i64) + clip as i64) as usize
}
