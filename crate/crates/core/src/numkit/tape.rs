//! Reverse-mode differentiation by operation recording.
//!
//! A [`Tape`] lives for one training step: the forward pass pushes nodes,
//! [`Tape::backward`] walks them in exact reverse order of recording, and the
//! tape is dropped afterwards. Only first derivatives are supported.

use super::matrix::{affine_rows, matmul_acc, matmul_tn_acc};
use super::ops::{log_sigmoid_scalar, log_softmax_into, relu_scalar, sigmoid_scalar};
use super::{Matrix, NumError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    ConcatCols(Var, Var),
    SliceRows { x: Var, start: usize },
    Embed { table: Var, ids: Vec<usize> },
    LogSoftmaxRows(Var),
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`.
    /// `None` if `v` does not influence the output or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_check(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::Shape { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is computed for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Rows of `x` mapped through `W x + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let value = affine_rows(self.value(x), self.value(w), self.value(b))?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Affine { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        shape_check("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        shape_check("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        shape_check("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Adds the `1 × cols` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(NumError::Shape { op: "add_row", left: av.shape(), right: rv.shape() });
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(relu_scalar);
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid_scalar);
        let ng = self.ng(a);
        self.push(value, Op::LogSigmoid(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Clamp into `[lo, hi]`. The gradient passes through strictly inside the
    /// band and is zero elsewhere.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp { x: a, lo, hi }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(NumError::Shape { op: "concat_cols", left: av.shape(), right: bv.shape() });
        }
        let mut value = Matrix::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = value.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(NumError::Shape { op: "slice_rows", left: av.shape(), right: (start + len, av.cols()) });
        }
        let value = av.slice_rows(start, len);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows { x: a, start }, ng))
    }

    /// Gathers rows `ids` of `table` (an embedding lookup).
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let tv = self.value(table);
        let mut value = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(NumError::Index { op: "embed", index: id, bound: tv.rows() });
            }
            value.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(value, Op::Embed { table, ids: ids.to_vec() }, ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            log_softmax_into(av.row(r), value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Column `idx[i]` of row `i`, as an `n × 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let av = self.value(a);
        if idx.len() != av.rows() {
            return Err(NumError::Shape { op: "pick", left: av.shape(), right: (idx.len(), 1) });
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= av.cols() {
                return Err(NumError::Index { op: "pick", index: c, bound: av.cols() });
            }
            data.push(av.get(r, c));
        }
        let ng = self.ng(a);
        Ok(self.push(Matrix::col_vector(data), Op::Pick { x: a, idx: idx.to_vec() }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let value = Matrix::filled(1, 1, av.sum() / n);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Back-propagates from `out`, seeding its gradient with ones.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = &self.nodes[out.0].value;
        grads[out.0] = Some(Matrix::filled(seed.rows(), seed.cols(), 1.0));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                if wants(*x) {
                    let acc = slot(grads, *x, val(*x).shape());
                    matmul_acc(g, val(*w), acc);
                }
                if wants(*w) {
                    let acc = slot(grads, *w, val(*w).shape());
                    matmul_tn_acc(g, val(*x), acc);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, val(*b).shape());
                    let dst = acc.as_mut_slice();
                    for r in 0..g.rows() {
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, wants(*a), g, |gi, _| gi, val(*a));
                accumulate(grads, *b, wants(*b), g, |gi, _| gi, val(*b));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, wants(*a), g, |gi, _| gi, val(*a));
                accumulate(grads, *b, wants(*b), g, |gi, _| -gi, val(*b));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let acc = slot(grads, *a, av.shape());
                    for ((d, gi), bi) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bv.shape());
                    for ((d, gi), ai) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, wants(*a), g, |gi, _| gi * c, val(*a));
            }
            Op::AddScalar(a) => accumulate(grads, *a, wants(*a), g, |gi, _| gi, val(*a)),
            Op::AddRow(a, row) => {
                accumulate(grads, *a, wants(*a), g, |gi, _| gi, val(*a));
                if wants(*row) {
                    let acc = slot(grads, *row, val(*row).shape());
                    let dst = acc.as_mut_slice();
                    for r in 0..g.rows() {
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Relu(a) => accumulate(grads, *a, wants(*a), g, |gi, x| if x > 0.0 { gi } else { 0.0 }, val(*a)),
            Op::Sigmoid(a) => accumulate(grads, *a, wants(*a), g, |gi, y| gi * y * (1.0 - y), &node.value),
            Op::Tanh(a) => accumulate(grads, *a, wants(*a), g, |gi, y| gi * (1.0 - y * y), &node.value),
            Op::LogSigmoid(a) => accumulate(grads, *a, wants(*a), g, |gi, x| gi * sigmoid_scalar(-x), val(*a)),
            Op::Square(a) => accumulate(grads, *a, wants(*a), g, |gi, x| 2.0 * x * gi, val(*a)),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                accumulate(grads, *x, wants(*x), g, |gi, v| if v > lo && v < hi { gi } else { 0.0 }, val(*x))
            }
            Op::ConcatCols(a, b) => {
                let split = val(*a).cols();
                if wants(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    for r in 0..g.rows() {
                        for (d, s) in acc.row_mut(r).iter_mut().zip(&g.row(r)[..split]) {
                            *d += s;
                        }
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, val(*b).shape());
                    for r in 0..g.rows() {
                        for (d, s) in acc.row_mut(r).iter_mut().zip(&g.row(r)[split..]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let acc = slot(grads, *x, val(*x).shape());
                    for r in 0..g.rows() {
                        for (d, s) in acc.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                if wants(*table) {
                    let acc = slot(grads, *table, val(*table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in acc.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if wants(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    for r in 0..g.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        let y = node.value.row(r);
                        for ((d, gi), yi) in acc.row_mut(r).iter_mut().zip(g.row(r)).zip(y) {
                            *d += gi - yi.exp() * gsum;
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                if wants(*x) {
                    let acc = slot(grads, *x, val(*x).shape());
                    for (r, &c) in idx.iter().enumerate() {
                        let cur = acc.get(r, c);
                        acc.set(r, c, cur + g.as_slice()[r]);
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g.as_slice()[0];
                accumulate(grads, *a, wants(*a), g, move |_, _| g0, val(*a));
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                let g0 = g.as_slice()[0] / n;
                accumulate(grads, *a, wants(*a), g, move |_, _| g0, val(*a));
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// `grads[v] += f(g_i, ref_i)` elementwise, where `reference` is the saved
/// activation the local derivative depends on. For the broadcasting
/// reductions (`Sum`, `Mean`) `g` is `1 × 1` and `f` ignores its first argument.
fn accumulate(
    grads: &mut [Option<Matrix>],
    v: Var,
    wanted: bool,
    g: &Matrix,
    f: impl Fn(f64, f64) -> f64,
    reference: &Matrix,
) {
    if !wanted {
        return;
    }
    let acc = slot(grads, v, reference.shape());
    if g.len() == reference.len() {
        for ((d, &gi), &ri) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(reference.as_slice()) {
            *d += f(gi, ri);
        }
    } else {
        let g0 = g.as_slice()[0];
        for (d, &ri) in acc.as_mut_slice().iter_mut().zip(reference.as_slice()) {
            *d += f(g0, ri);
        }
    }
}
