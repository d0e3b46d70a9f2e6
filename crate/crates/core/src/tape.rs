//! Minimal reverse-mode automatic differentiation over 2-d tensors.
//!
//! A [`Tape`] records every operation in evaluation order. `backward` walks
//! the record in reverse and accumulates gradients into every node that
//! (transitively) depends on a trainable leaf. Non-differentiable choices
//! made in the forward pass (max selections, clamps) are folded into a
//! branch signature so finite-difference probes can tell when a
//! perturbation crossed a kink.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Select {
    /// `out[I][J] = mean_{r∈I} max_{c∈J} M[r][c]`
    MaxOverCols,
    /// `out[I][J] = mean_{c∈J} max_{r∈I} M[r][c]`
    MaxOverRows,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    NormalizeRows(Var, Vec<f64>),
    // (flat source index, flat output index, weight)
    Route(Var, Vec<(usize, usize, f64)>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Gelu(Var),
    Sum(Var),
    Pick(Var, Vec<usize>),
}

struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branch: u64,
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<DenseTensor> {
        self.grads[v.0].take()
    }
}

const BRANCH_MIX: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Signature of every discrete choice recorded so far.
    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    fn note_branch(&mut self, choice: usize) {
        self.branch = (self.branch ^ choice as u64).wrapping_mul(BRANCH_MIX).rotate_left(5);
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_scalar()
    }

    fn push(&mut self, value: DenseTensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: DenseTensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Trainable input.
    pub fn param(&mut self, value: DenseTensor) -> Var {
        let (r, c) = (value.rows(), value.cols());
        self.push(DenseTensor::from_parts(r, c, value.into_data()), Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: DenseTensor) -> Var {
        let (r, c) = (value.rows(), value.cols());
        self.push(DenseTensor::from_parts(r, c, value.into_data()), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push_op(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err("tape.mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = DenseTensor::from_parts(ta.rows(), ta.cols(), data);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(shape_err("tape.add_row", format!("{r}x{c} + {:?}", self.dims(row))));
        }
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        Ok(self.push_op(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push_op(out, Op::AddConst(a), &[a])
    }

    /// Multiplies row `r` of `a` by `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, _) = self.dims(a);
        if factors.len() != r {
            return Err(shape_err("tape.scale_rows", format!("{} factors for {r} rows", factors.len())));
        }
        let mut out = self.value(a).clone();
        for (i, f) in factors.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push_op(out, Op::ScaleRows(a, factors), &[a]))
    }

    /// Rows `idx` of `table`, in order (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let rows = self.dims(table).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::OutOfVocabulary { id: bad, size: rows });
        }
        let out = self.value(table).select_rows(&idx);
        Ok(self.push_op(out, Op::Gather(table, idx), &[table]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("tape.concat_rows", format!("width {} vs {cols}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = DenseTensor::from_parts(rows, cols, data);
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(shape_err("tape.concat_cols", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = DenseTensor::from_parts(rows, cols, data);
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Var {
        let out = self.value(a).slice_rows(range.start, range.len());
        self.push_op(out, Op::SliceRows(a, range.start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.rows() * range.len());
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[range.clone()]);
        }
        let out = DenseTensor::from_parts(t.rows(), range.len(), data);
        self.push_op(out, Op::SliceCols(a, range.start), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    /// Column-wise mean, a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let out = DenseTensor::from_parts(1, c, out);
        self.push_op(out, Op::MeanRows(a), &[a])
    }

    /// Scales every row to unit Euclidean norm; zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let n = libm::sqrt(t.row(i).iter().map(|v| v * v).sum());
            if n == 0.0 {
                return Err(Error::ZeroNorm("token embedding"));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push_op(out, Op::NormalizeRows(a, norms), &[a]))
    }

    /// Block-wise max-then-mean reduction of a similarity matrix. Row block
    /// `I` and column block `J` reduce to entry `[I][J]` of the output.
    /// Ties resolve to the lowest index.
    pub fn block_max_mean(
        &mut self,
        src: Var,
        row_blocks: &[Range<usize>],
        col_blocks: &[Range<usize>],
        select: Select,
    ) -> Result<Var> {
        let (rows, cols) = self.dims(src);
        let bad = |b: &[Range<usize>], n: usize| b.iter().any(|r| r.is_empty() || r.end > n);
        if bad(row_blocks, rows) || bad(col_blocks, cols) {
            return Err(shape_err("tape.block_max_mean", format!("blocks outside {rows}x{cols}")));
        }
        let (nb_r, nb_c) = (row_blocks.len(), col_blocks.len());
        let mut out = vec![0.0; nb_r * nb_c];
        let mut routes = Vec::new();
        let mut choices = Vec::new();
        {
            let m = self.value(src);
            for (bi, rb) in row_blocks.iter().enumerate() {
                for (bj, cb) in col_blocks.iter().enumerate() {
                    let o = bi * nb_c + bj;
                    match select {
                        Select::MaxOverCols => {
                            let w = 1.0 / rb.len() as f64;
                            for r in rb.clone() {
                                let row = m.row(r);
                                let mut best = cb.start;
                                for c in cb.clone() {
                                    if row[c] > row[best] {
                                        best = c;
                                    }
                                }
                                out[o] += w * row[best];
                                routes.push((r * cols + best, o, w));
                                choices.push(best - cb.start);
                            }
                        }
                        Select::MaxOverRows => {
                            let w = 1.0 / cb.len() as f64;
                            for c in cb.clone() {
                                let mut best = rb.start;
                                for r in rb.clone() {
                                    if m.get(r, c) > m.get(best, c) {
                                        best = r;
                                    }
                                }
                                out[o] += w * m.get(best, c);
                                routes.push((best * cols + c, o, w));
                                choices.push(best - rb.start);
                            }
                        }
                    }
                }
            }
        }
        for c in choices {
            self.note_branch(c);
        }
        let out = DenseTensor::from_parts(nb_r, nb_c, out);
        Ok(self.push_op(out, Op::Route(src, routes), &[src]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push_op(out, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("logarithm of {bad}")));
        }
        let out = t.map(libm::log);
        Ok(self.push_op(out, Op::Ln(a), &[a]))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a);
        let mut choices = Vec::new();
        let out = t.map(|v| v.clamp(lo, hi));
        for (i, v) in t.data().iter().enumerate() {
            if *v < lo || *v > hi {
                choices.push(i);
            }
        }
        for c in choices {
            self.note_branch(c + 1);
        }
        self.push_op(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)));
        self.push_op(out, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(DenseTensor::from_parts(1, 1, vec![s]), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Selected `(row, col)` entries as a `1 x n` row.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if entries.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(shape_err("tape.pick", format!("index outside {r}x{c}")));
        }
        let flat: Vec<usize> = entries.iter().map(|&(i, j)| i * c + j).collect();
        let data = flat.iter().map(|&f| self.value(a).data()[f]).collect();
        let out = DenseTensor::from_parts(1, flat.len(), data);
        Ok(self.push_op(out, Op::Pick(a, flat), &[a]))
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let o = &self.nodes[out.0].value;
        if o.len() != 1 {
            return Err(shape_err("tape.backward", format!("output has {} elements", o.len())));
        }
        let mut grads: Vec<Option<DenseTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(DenseTensor::from_parts(1, 1, vec![1.0]));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<DenseTensor>], v: Var) -> Option<&'g mut DenseTensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let t = &node.value;
        Some(grads[v.0].get_or_insert_with(|| DenseTensor::from_parts(t.rows(), t.cols(), vec![0.0; t.len()])))
    }

    fn propagate(&self, node: &Node, g: &DenseTensor, grads: &mut [Option<DenseTensor>]) {
        let y = &node.value;
        let (gr, gc) = (g.rows(), g.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(s) = self.slot(grads, *a) {
                    gemm_nt(g.data(), tb.data(), s.data_mut(), m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm_tn(ta.data(), g.data(), s.data_mut(), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(s) = self.slot(grads, *a) {
                    gemm_nn(g.data(), tb.data(), s.data_mut(), m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm_tn(g.data(), ta.data(), s.data_mut(), m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.add_scaled_assign(g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gv), bv) in s.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, gv), av) in s.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(g);
                }
                if let Some(s) = self.slot(grads, *row) {
                    for r in 0..gr {
                        for (o, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_scaled_assign(g, *c);
                }
            }
            Op::AddConst(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(g);
                }
            }
            Op::ScaleRows(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (r, fr) in f.iter().enumerate() {
                        for (o, v) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += fr * v;
                        }
                    }
                }
            }
            Op::Gather(t, idx) => {
                if let Some(s) = self.slot(grads, *t) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in s.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(s) = self.slot(grads, *p) {
                        for (o, v) in s.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += v;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(s) = self.slot(grads, *p) {
                        for r in 0..gr {
                            for (o, v) in s.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(s) = self.slot(grads, *a) {
                    let c = gc;
                    let dst = &mut s.data_mut()[start * c..(start + gr) * c];
                    for (o, v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..gr {
                        for (o, v) in s.row_mut(r)[*start..start + gc].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(&g.transpose());
                }
            }
            Op::MeanRows(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let r = s.rows();
                    let w = 1.0 / r as f64;
                    for i in 0..r {
                        for (o, v) in s.row_mut(i).iter_mut().zip(g.data()) {
                            *o += w * v;
                        }
                    }
                }
            }
            Op::NormalizeRows(a, norms) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr_ = g.row(r);
                        let proj: f64 = yr.iter().zip(gr_).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in s.row_mut(r).iter_mut().zip(gr_).zip(yr) {
                            *o += (gv - yv * proj) / n;
                        }
                    }
                }
            }
            Op::Route(a, routes) => {
                if let Some(s) = self.slot(grads, *a) {
                    let d = s.data_mut();
                    for &(src, out, w) in routes {
                        d[src] += w * g.data()[out];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..gr {
                        let yr = y.row(r);
                        let gr_ = g.row(r);
                        let dotp: f64 = yr.iter().zip(gr_).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in s.row_mut(r).iter_mut().zip(gr_).zip(yr) {
                            *o += yv * (gv - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..gr {
                        let yr = y.row(r);
                        let gr_ = g.row(r);
                        let total: f64 = gr_.iter().sum();
                        for ((o, gv), yv) in s.row_mut(r).iter_mut().zip(gr_).zip(yr) {
                            *o += gv - libm::exp(*yv) * total;
                        }
                    }
                }
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gv), xv) in s.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += gv / xv;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gv), xv) in s.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xv >= *lo && *xv <= *hi {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    let inv_sqrt_2pi = 0.398_942_280_401_432_7;
                    for ((o, gv), &xv) in s.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        let cdf = 0.5 * (1.0 + libm::erf(xv * core::f64::consts::FRAC_1_SQRT_2));
                        let pdf = inv_sqrt_2pi * libm::exp(-0.5 * xv * xv);
                        *o += gv * (cdf + xv * pdf);
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.as_scalar();
                if let Some(s) = self.slot(grads, *a) {
                    s.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Pick(a, flat) => {
                if let Some(s) = self.slot(grads, *a) {
                    let d = s.data_mut();
                    for (k, &f) in flat.iter().enumerate() {
                        d[f] += g.data()[k];
                    }
                }
            }
        }
    }
}
