//! Reverse-mode differentiation over a small vocabulary of matrix operations.
//!
//! Every value on the [`Tape`] is a dense row-major matrix. Binary elementwise
//! operations broadcast singleton rows/columns (`n×m` against `1×m`, `n×1` or
//! `1×1`). Parameter leaves remember their offset in a flat parameter vector, so
//! a backward pass scatters gradients straight into that vector.
//!
//! The tape records the first node whose value is not finite; callers turn that
//! into [`Error::NonFinite`] through [`Tape::check_finite`].

use std::ops::Range;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

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
    Constant,
    Param { offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Expm1(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    SqDist(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowRange(Var, usize, usize),
    CumSumCols(Var),
    Column(Var, usize),
    Rows(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Expm1(..) => "expm1",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SqDist(..) => "sq_dist",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::RowRange(..) => "row_range",
            Op::CumSumCols(..) => "cumsum_cols",
            Op::Column(..) => "column",
            Op::Rows(..) => "rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
    label: Option<String>,
    requires_grad: bool,
}

/// A record of matrix operations supporting one reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sum `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut out = g.to_owned();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Attach a human-readable name used in non-finite diagnostics.
    pub fn label(&mut self, v: Var, name: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(name.into());
        v
    }

    pub fn describe(&self, v: Var) -> String {
        let node = &self.nodes[v.0];
        match &node.label {
            Some(label) => format!("#{} {} '{}'", v.0, node.op.name(), label),
            None => format!("#{} {}", v.0, node.op.name()),
        }
    }

    /// Fails with the first node that held a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(i) => Err(Error::NonFinite {
                node: self.describe(Var(i)),
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            op,
            value,
            label: None,
            requires_grad,
        });
        Var(idx)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Row vector constant.
    pub fn row_const(&mut self, values: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    /// A `rows×cols` parameter block whose entries live at
    /// `offset..offset + rows*cols` of the flat parameter vector.
    pub fn param(&mut self, values: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        assert_eq!(values.len(), rows * cols, "parameter block size");
        let value = Array2::from_shape_vec((rows, cols), values.to_vec()).unwrap();
        self.push(Op::Param { offset }, value, true)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb)
            .unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?} in {}", op.name()));
        let va = self.value(a).broadcast(shape).unwrap();
        let vb = self.value(b).broadcast(shape).unwrap();
        let mut out = Array2::zeros(shape);
        Zip::from(&mut out)
            .and(&va)
            .and(&vb)
            .for_each(|o, &x, &y| *o = f(x, y));
        let rg = self.grad_of(&[a, b]);
        self.push(op, out, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).mapv(f);
        let rg = self.grad_of(&[a]);
        self.push(op, out, rg)
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.1, sb.0, "matmul inner dimensions {sa:?} x {sb:?}");
        let out = self.value(a).dot(self.value(b));
        let rg = self.grad_of(&[a, b]);
        self.push(Op::MatMul(a, b), out, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.shift(n, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn expm1(&mut self, a: Var) -> Var {
        self.unary(a, Op::Expm1(a), f64::exp_m1)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of every entry, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.grad_of(&[a]);
        self.push(Op::Sum(a), Array2::from_elem((1, 1), s), rg)
    }

    /// Mean of every entry, as a `1×1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `n×m -> n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.grad_of(&[a]);
        self.push(Op::SumCols(a), out, rg)
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.grad_of(&[a]);
        self.push(Op::SoftmaxRows(a), out, rg)
    }

    /// Pairwise squared distances between the rows of `x` (`n×d`) and the rows
    /// of `c` (`h×d`), giving `n×h`.
    pub fn sq_dist(&mut self, x: Var, c: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(c));
        assert_eq!(xv.ncols(), cv.ncols(), "sq_dist feature dimension");
        let mut out = Array2::zeros((xv.nrows(), cv.nrows()));
        for (i, xr) in xv.rows().into_iter().enumerate() {
            for (j, cr) in cv.rows().into_iter().enumerate() {
                out[[i, j]] = xr.iter().zip(cr.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        let rg = self.grad_of(&[x, c]);
        self.push(Op::SqDist(x, c), out, rg)
    }

    /// Horizontal concatenation of blocks with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let rg = self.grad_of(parts);
        self.push(Op::ConcatCols(parts.to_vec()), out, rg)
    }

    /// Vertical concatenation of blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let rg = self.grad_of(parts);
        self.push(Op::ConcatRows(parts.to_vec()), out, rg)
    }

    /// Rows `start..end` as a new node.
    pub fn row_range(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(ndarray::s![start..end, ..]).to_owned();
        let rg = self.grad_of(&[a]);
        self.push(Op::RowRange(a, start, end), out, rg)
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.rows_mut() {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        let rg = self.grad_of(&[a]);
        self.push(Op::CumSumCols(a), out, rg)
    }

    /// Column `j` as an `n×1` node.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let out = self.value(a).column(j).to_owned().insert_axis(Axis(1));
        let rg = self.grad_of(&[a]);
        self.push(Op::Column(a, j), out, rg)
    }

    /// Gathers the listed rows (repeats allowed).
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        let rg = self.grad_of(&[a]);
        self.push(Op::Rows(a, idx.to_vec()), out, rg)
    }

    /// Gradient of the `1×1` node `output` with respect to every parameter
    /// leaf, as a dense vector of length `n_params`.
    pub fn gradient(&self, output: Var, n_params: usize) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; n_params];
        self.backward_into(output, &mut grad)?;
        Ok(grad)
    }

    /// Accumulates the gradient of `output` into `grad` and returns the ranges
    /// of `grad` that received contributions.
    pub fn backward_into(&self, output: Var, grad: &mut [f64]) -> Result<Vec<Range<usize>>> {
        self.check_finite()?;
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut touched = Vec::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    node: format!("gradient of {}", self.describe(Var(idx))),
                });
            }
            self.propagate(idx, &g, &mut grads, grad, &mut touched);
        }
        Ok(touched)
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        out_grad: &mut [f64],
        touched: &mut Vec<Range<usize>>,
    ) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param { offset } => {
                let range = *offset..*offset + g.len();
                for (dst, src) in out_grad[range.clone()].iter_mut().zip(g.iter()) {
                    *dst += src;
                }
                touched.push(range);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                self.accumulate(grads, *b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                self.accumulate(grads, *b, -reduce_to(g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let shape = g.dim();
                if self.nodes[a.0].requires_grad {
                    let vb = self.value(*b).broadcast(shape).unwrap();
                    self.accumulate(grads, *a, reduce_to(&(g * &vb), self.shape(*a)));
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.value(*a).broadcast(shape).unwrap();
                    self.accumulate(grads, *b, reduce_to(&(g * &va), self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                let shape = g.dim();
                let vb = self.value(*b).broadcast(shape).unwrap();
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, reduce_to(&(g / &vb), self.shape(*a)));
                }
                if self.nodes[b.0].requires_grad {
                    let mut d = g * out;
                    d /= &vb;
                    self.accumulate(grads, *b, -reduce_to(&d, self.shape(*b)));
                }
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::Shift(a) => self.accumulate(grads, *a, g.to_owned()),
            Op::Sigmoid(a) => {
                let mut d = g.to_owned();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                let mut d = g.to_owned();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= sigmoid(-x));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.to_owned();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * out),
            Op::Expm1(a) => {
                let mut d = g.to_owned();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y + 1.0);
                self.accumulate(grads, *a, d);
            }
            Op::Ln(a) => self.accumulate(grads, *a, g / self.value(*a)),
            Op::Sqrt(a) => {
                let mut d = g.to_owned();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 0.5 / y);
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let mut d = g.to_owned();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= 2.0 * x);
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.to_owned();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if !(x > *lo && x < *hi) {
                        *d = 0.0;
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::SumCols(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, g.broadcast(shape).unwrap().to_owned());
            }
            Op::SoftmaxRows(a) => {
                let mut d = Array2::zeros(out.dim());
                for ((mut drow, grow), yrow) in d.rows_mut().into_iter().zip(g.rows()).zip(out.rows()) {
                    let inner: f64 = grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *dv = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SqDist(x, c) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                if self.nodes[x.0].requires_grad {
                    let rows = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = (xv * &rows - g.dot(cv)) * 2.0;
                    self.accumulate(grads, *x, d);
                }
                if self.nodes[c.0].requires_grad {
                    let cols = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let d = (g.t().dot(xv) - cv * &cols) * -2.0;
                    self.accumulate(grads, *c, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let width = self.shape(*p).1;
                    let slice = g.slice(ndarray::s![.., start..start + width]).to_owned();
                    self.accumulate(grads, *p, slice);
                    start += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let height = self.shape(*p).0;
                    let slice = g.slice(ndarray::s![start..start + height, ..]).to_owned();
                    self.accumulate(grads, *p, slice);
                    start += height;
                }
            }
            Op::RowRange(a, start, end) => {
                if self.nodes[a.0].requires_grad {
                    let shape = self.shape(*a);
                    let slot = grads[a.0].get_or_insert_with(|| Array2::zeros(shape));
                    let mut dst = slot.slice_mut(ndarray::s![*start..*end, ..]);
                    dst += g;
                }
            }
            Op::CumSumCols(a) => {
                let mut d = g.to_owned();
                for mut row in d.rows_mut() {
                    let mut acc = 0.0;
                    for v in row.iter_mut().rev() {
                        acc += *v;
                        *v = acc;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Column(a, j) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.column_mut(*j).assign(&g.column(0));
                self.accumulate(grads, *a, d);
            }
            Op::Rows(a, idx) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (src, &i) in g.rows().into_iter().zip(idx) {
                    let mut dst = d.row_mut(i);
                    dst += &src;
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}
