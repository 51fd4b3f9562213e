//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in execution order; nodes are appended
//! after their inputs, so walking the tape backwards is a reverse topological
//! order and each node is visited once.

use crate::matrix::Matrix;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-graph normalized adjacency blocks for a batch of equally sized graphs.
///
/// Node rows of graph `b` occupy rows `b·n .. (b+1)·n` of a batched feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    n_nodes: usize,
    blocks: Vec<Matrix>,
}

impl GraphBatch {
    pub fn new(n_nodes: usize, blocks: Vec<Matrix>) -> Self {
        assert!(blocks.iter().all(|b| b.shape() == (n_nodes, n_nodes)), "adjacency block shape mismatch");
        Self { n_nodes, blocks }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_graphs(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, b: usize) -> &Matrix {
        &self.blocks[b]
    }

    /// Each output entry sums its terms in sorted order, so relabelling the nodes of a
    /// graph permutes the result bit-for-bit.
    fn apply(&self, x: &Matrix, transpose: bool) -> Matrix {
        let n = self.n_nodes;
        assert_eq!(x.rows(), n * self.blocks.len(), "graph batch row mismatch");
        let c = x.cols();
        let mut out = Matrix::zeros(x.rows(), c);
        let mut nbrs: Vec<(f64, usize)> = Vec::with_capacity(n);
        let mut terms: Vec<f64> = Vec::with_capacity(n);
        for (b, a) in self.blocks.iter().enumerate() {
            for i in 0..n {
                nbrs.clear();
                for j in 0..n {
                    let w = if transpose { a[(j, i)] } else { a[(i, j)] };
                    if w != 0.0 {
                        nbrs.push((w, b * n + j));
                    }
                }
                let dst = b * n + i;
                for k in 0..c {
                    terms.clear();
                    terms.extend(nbrs.iter().map(|&(w, src)| w * x[(src, k)]));
                    if terms.len() > 2 {
                        terms.sort_by(f64::total_cmp);
                    }
                    out[(dst, k)] = terms.iter().sum();
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Rc<[usize]>),
    ScatterSum(Var, Rc<[usize]>),
    GraphAggregate(Var, Rc<GraphBatch>),
    BlockMean(Var, usize),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "scalar() on a {}x{} value", m.rows(), m.cols());
        m.as_slice()[0]
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a, b), f64::min)
    }

    /// `a (n×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row column mismatch");
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (x, r) in value.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *x += r;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a (n×c) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols(), 1, "mul_col expects a column vector");
        assert_eq!(av.rows(), cv.rows(), "mul_col row mismatch");
        let mut value = av.clone();
        for i in 0..value.rows() {
            let s = cv.as_slice()[i];
            for x in value.row_mut(i) {
                *x *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::filled(1, 1, m.sum() / m.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    /// Row sums: `n×c → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let value = Matrix::from_vec(m.rows(), 1, data);
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start <= end && end <= m.cols(), "slice out of range");
        let mut value = Matrix::zeros(m.rows(), end - start);
        for i in 0..m.rows() {
            value.row_mut(i).copy_from_slice(&m.row(i)[start..end]);
        }
        let ng = self.ng(a);
        self.push(value, Op::Slice(a, start), ng)
    }

    /// Row `k` of the result is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let value = self.value(a).permute_rows(index);
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, index.into()), ng)
    }

    /// Row `k` of `a` is added into row `segment[k]` of an `n_out`-row result.
    pub fn scatter_sum_rows(&mut self, a: Var, segment: &[usize], n_out: usize) -> Var {
        let m = self.value(a);
        assert_eq!(segment.len(), m.rows(), "segment length mismatch");
        let mut value = Matrix::zeros(n_out, m.cols());
        for (k, &s) in segment.iter().enumerate() {
            for (o, x) in value.row_mut(s).iter_mut().zip(m.row(k)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::ScatterSum(a, segment.into()), ng)
    }

    /// `blockdiag(Â_b) · x` for a batch of graphs.
    pub fn graph_aggregate(&mut self, x: Var, graphs: &Rc<GraphBatch>) -> Var {
        let value = graphs.apply(self.value(x), false);
        let ng = self.ng(x);
        self.push(value, Op::GraphAggregate(x, Rc::clone(graphs)), ng)
    }

    /// Mean over consecutive row blocks of `block` rows: `(B·block)×c → B×c`.
    pub fn block_mean_rows(&mut self, a: Var, block: usize) -> Var {
        let m = self.value(a);
        assert!(block > 0 && m.rows() % block == 0, "rows not divisible by block");
        let nb = m.rows() / block;
        let mut value = Matrix::zeros(nb, m.cols());
        for i in 0..m.rows() {
            for (o, x) in value.row_mut(i / block).iter_mut().zip(m.row(i)) {
                *o += x / block as f64;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::BlockMean(a, block), ng)
    }

    /// Reverse pass seeded with ones at `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        let lv = self.value(loss);
        grads[loss.0] = Some(Matrix::filled(lv.rows(), lv.cols(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = &node.value;
            let acc = |v: Var, d: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.ng(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(bv, |x, y| x * y), &mut grads);
                    acc(*b, g.zip_map(av, |x, y| x * y), &mut grads);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(bv, |x, y| x / y), &mut grads);
                    let db = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.as_slice()
                            .iter()
                            .zip(av.as_slice())
                            .zip(bv.as_slice())
                            .map(|((gg, x), y)| -gg * x / (y * y))
                            .collect(),
                    );
                    acc(*b, db, &mut grads);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mask_a = av.zip_map(bv, |x, y| if x <= y { 1.0 } else { 0.0 });
                    acc(*a, g.zip_map(&mask_a, |x, m| x * m), &mut grads);
                    acc(*b, g.zip_map(&mask_a, |x, m| x * (1.0 - m)), &mut grads);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*row, dr, &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let mut da = g.clone();
                    let mut dc = Matrix::zeros(cv.rows(), 1);
                    for r in 0..g.rows() {
                        let s = cv.as_slice()[r];
                        dc.as_mut_slice()[r] = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                        for x in da.row_mut(r) {
                            *x *= s;
                        }
                    }
                    acc(*a, da, &mut grads);
                    acc(*col, dc, &mut grads);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        acc(*a, g.matmul_t(bv), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, av.t_matmul(&g), &mut grads);
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s), &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::Tanh(a) => acc(*a, g.zip_map(val, |x, y| x * (1.0 - y * y)), &mut grads),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(*a, g.zip_map(av, |x, y| if y > 0.0 { x } else { 0.0 }), &mut grads)
                }
                Op::Exp(a) => acc(*a, g.zip_map(val, |x, y| x * y), &mut grads),
                Op::Ln(a) => {
                    let av = self.value(*a);
                    acc(*a, g.zip_map(av, |x, y| x / y), &mut grads)
                }
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    acc(*a, g.zip_map(av, |x, y| x * sigmoid(y)), &mut grads)
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    acc(*a, g.zip_map(av, |x, y| 2.0 * x * y), &mut grads)
                }
                Op::Sqrt(a) => acc(*a, g.zip_map(val, |x, y| 0.5 * x / y), &mut grads),
                Op::Clamp(a, lo, hi) => {
                    let av = self.value(*a);
                    let (lo, hi) = (*lo, *hi);
                    acc(*a, g.zip_map(av, |x, y| if y >= lo && y <= hi { x } else { 0.0 }), &mut grads)
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    acc(*a, Matrix::filled(av.rows(), av.cols(), g.as_slice()[0]), &mut grads)
                }
                Op::MeanAll(a) => {
                    let av = self.value(*a);
                    let s = g.as_slice()[0] / av.len() as f64;
                    acc(*a, Matrix::filled(av.rows(), av.cols(), s), &mut grads)
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let s = g.as_slice()[r];
                        d.row_mut(r).iter_mut().for_each(|x| *x = s);
                    }
                    acc(*a, d, &mut grads)
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if self.ng(p) {
                            let mut d = Matrix::zeros(g.rows(), pc);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                            }
                            acc(p, d, &mut grads);
                        }
                        off += pc;
                    }
                }
                Op::Slice(a, start) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d, &mut grads)
                }
                Op::Gather(a, index) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for (k, &src) in index.iter().enumerate() {
                        for (o, x) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    acc(*a, d, &mut grads)
                }
                Op::ScatterSum(a, segment) => {
                    acc(*a, g.permute_rows(segment), &mut grads);
                }
                Op::GraphAggregate(x, graphs) => acc(*x, graphs.apply(&g, true), &mut grads),
                Op::BlockMean(a, block) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (o, x) in d.row_mut(r).iter_mut().zip(g.row(r / block)) {
                            *o = x / *block as f64;
                        }
                    }
                    acc(*a, d, &mut grads)
                }
            }
        }
        Gradients { grads }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diamond_accumulates() {
        // y = x·x + x with a single leaf feeding three consumers
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 1, 3.0));
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap().as_slice(), &[7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 2, 1.0));
        let c = t.constant(Matrix::filled(1, 2, 2.0));
        let p = t.mul(x, c);
        let s = t.sum(p);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn detach_cuts_path() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 1, 2.0));
        let d = t.detach(x);
        let y = t.mul(x, d);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap().as_slice(), &[2.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
