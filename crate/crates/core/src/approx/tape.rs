//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! `[rows x cols]` matrices; batches run along rows. Calling
//! [`Tape::backward`] on a `1x1` node walks the record in reverse and
//! returns the adjoint of every node that requires a gradient.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
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
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    LogAddExp(Var, Var),
    Concat(Vec<Var>),
    Columns(Var, usize),
    TileRows(Var, usize),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose adjoint is reported by `backward`.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x[r x c] + row[1 x c]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `x[r x c] * col[r x 1]`, broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let value = self.value(x) * self.value(col);
        let rg = self.rg(x) || self.rg(col);
        self.push(value, Op::MulCol(x, col), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) + k;
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).mapv(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Hard clamp; the adjoint is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), move |v| v.clamp(lo, hi))
    }

    /// Elementwise minimum; ties route the adjoint to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        Zip::from(&mut value).and(self.value(b)).for_each(|x, &y| {
            if y < *x {
                *x = y
            }
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Min(a, b), rg)
    }

    /// Elementwise `ln(e^a + e^b)`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        Zip::from(&mut value)
            .and(self.value(b))
            .for_each(|x, &y| *x = log_add_exp(*x, y));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::LogAddExp(a, b), rg)
    }

    /// Concatenate along columns; all parts share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat: row counts differ");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `[start, end)`.
    pub fn columns(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::Columns(x, start), rg)
    }

    /// Stack `k` copies of `x` vertically; row `i` of copy `j` lands at `j * rows + i`.
    pub fn tile_rows(&mut self, x: Var, k: usize) -> Var {
        let v = self.value(x);
        let views: Vec<_> = (0..k).map(|_| v.view()).collect();
        let value = concatenate(Axis(0), &views).expect("tile_rows");
        let rg = self.rg(x);
        self.push(value, Op::TileRows(x, k), rg)
    }

    /// Row sums, `[r x c] -> [r x 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(value, Op::SumCols(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let value = Array2::from_elem((1, 1), self.value(x).sum() / n);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) && self.rg(*b) {
                        accumulate(&mut grads, *a, g.clone());
                        accumulate(&mut grads, *b, g);
                    } else if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    } else {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::MulCol(x, col) => {
                    if self.rg(*col) {
                        let gc = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *col, gc);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, &g * self.value(*col));
                    }
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g * *k),
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &xi| {
                        if xi <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gi, &y| *gi *= 1.0 - y * y);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => accumulate(&mut grads, *x, g * &node.value),
                Op::Log(x) => accumulate(&mut grads, *x, g / self.value(*x)),
                Op::Square(x) => accumulate(&mut grads, *x, g * self.value(*x) * 2.0),
                Op::Softplus(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &xi| *gi *= sigmoid(xi));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &xi| {
                        if xi < *lo || xi > *hi {
                            *gi = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut ga = g.clone();
                        Zip::from(&mut ga).and(va).and(vb).for_each(|gi, &x, &y| {
                            if y < x {
                                *gi = 0.0
                            }
                        });
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = g;
                        Zip::from(&mut gb).and(va).and(vb).for_each(|gi, &x, &y| {
                            if y >= x {
                                *gi = 0.0
                            }
                        });
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::LogAddExp(a, b) => {
                    let y = &node.value;
                    if self.rg(*a) {
                        let mut ga = g.clone();
                        Zip::from(&mut ga)
                            .and(self.value(*a))
                            .and(y)
                            .for_each(|gi, &x, &yi| *gi *= (x - yi).exp());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = g;
                        Zip::from(&mut gb)
                            .and(self.value(*b))
                            .and(y)
                            .for_each(|gi, &x, &yi| *gi *= (x - yi).exp());
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            let gp = g.slice(s![.., start..start + w]).to_owned();
                            accumulate(&mut grads, *p, gp);
                        }
                        start += w;
                    }
                }
                Op::Columns(x, start) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    let w = g.ncols();
                    gx.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::TileRows(x, k) => {
                    let rows = self.value(*x).nrows();
                    let mut gx = g.slice(s![0..rows, ..]).to_owned();
                    for j in 1..*k {
                        gx += &g.slice(s![j * rows..(j + 1) * rows, ..]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumCols(x) => {
                    let gx = g.broadcast(self.value(*x).dim()).expect("sum_cols").to_owned();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.value(*x).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let dim = self.value(*x).dim();
                    let n = (dim.0 * dim.1).max(1) as f64;
                    accumulate(&mut grads, *x, Array2::from_elem(dim, g[[0, 0]] / n));
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
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

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
