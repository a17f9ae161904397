//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied to its variables. Calling
//! [`Tape::backward`] on a 1x1 output walks the record in reverse and returns
//! exact partial derivatives for every variable created with
//! [`Tape::param`]. Variables created with [`Tape::constant`] (and anything
//! computed only from constants) are skipped during the backward sweep.
//!
//! The primitive set is deliberately small: affine maps, `tanh`, `softplus`,
//! `sigmoid`, `log`, squares, elementwise arithmetic, column slicing and
//! concatenation, entry gathers, matrix products, traces and the Gaussian
//! log-density. Every loss in this crate is a composition of these.

use std::borrow::Cow;

use super::matrix::{affine_backward_input, affine_backward_params, affine_forward, Matrix};
use crate::error::{Error, Result};

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Softplus(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow { x: Var, row: Var },
    Scale(Var, f64),
    AddConst(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Gather { x: Var, at: Vec<(usize, usize)> },
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Trace(Var),
    GaussianLogPdf { value: Var, mean: Var, std: Var },
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Matrix>,
    requires_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
///
/// Leaves may borrow their values (`'a`), so frozen model parameters can be
/// placed on the tape without copying.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Partial derivatives produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic function, shared with callers that evaluate edge weights directly.
pub fn sigmoid(x: f64) -> f64 {
    stable_sigmoid(x)
}

/// `ln(1 + eˣ)` evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    stable_softplus(x)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A differentiable leaf that borrows its value.
    pub fn param_ref(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Borrowed(value),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Borrowed(value),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn expect_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `x · wᵀ + b` with `x` B×in, `w` out×in, `b` 1×out.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() || bv.shape() != (1, wv.rows()) {
            return Err(Error::Shape(format!(
                "affine: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let out = affine_forward(xv, wv, bv);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Op::Affine { x, w, b }, out, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.needs(&[x]);
        self.push(Op::Tanh(x), out, rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(stable_softplus);
        let rg = self.needs(&[x]);
        self.push(Op::Softplus(x), out, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(stable_sigmoid);
        let rg = self.needs(&[x]);
        self.push(Op::Sigmoid(x), out, rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.needs(&[x]);
        self.push(Op::Log(x), out, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.needs(&[x]);
        self.push(Op::Square(x), out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    /// Multiplies every row of `x` (B×n) elementwise by `row` (1×n).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "mul_row: {:?} by {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &m) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o *= m;
            }
        }
        let rg = self.needs(&[x, row]);
        Ok(self.push(Op::MulRow { x, row }, out, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.needs(&[x]);
        self.push(Op::Scale(x, factor), out, rg)
    }

    pub fn add_const(&mut self, x: Var, offset: f64) -> Var {
        let out = self.value(x).map(|v| v + offset);
        let rg = self.needs(&[x]);
        self.push(Op::AddConst(x), out, rg)
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(Error::Shape("concat of nothing".into())),
        };
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Shape("concat: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), out, rg))
    }

    /// Columns `start..start + len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Shape(format!(
                "slice {start}..{} of {} columns",
                start + len,
                xv.cols()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Slice { x, start }, out, rg))
    }

    /// Collects the listed entries of `x` into a 1×m row.
    pub fn gather(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let mut values = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= xv.rows() || c >= xv.cols() {
                return Err(Error::Shape(format!(
                    "gather ({r},{c}) outside {:?}",
                    xv.shape()
                )));
            }
            values.push(xv.get(r, c));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Op::Gather {
                x,
                at: at.to_vec(),
            },
            Matrix::row_vector(&values),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(Op::Sum(x), out, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Matrix::scalar(v.sum() / v.len() as f64);
        let rg = self.needs(&[x]);
        self.push(Op::Mean(x), out, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} by {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul(bv);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != xv.cols() {
            return Err(Error::Shape(format!("trace of {:?}", xv.shape())));
        }
        let out = Matrix::scalar(xv.trace());
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Trace(x), out, rg))
    }

    /// Elementwise `log N(value; mean, std²)`.
    pub fn gaussian_log_pdf(&mut self, value: Var, mean: Var, std: Var) -> Result<Var> {
        self.expect_same_shape(value, mean, "gaussian_log_pdf")?;
        self.expect_same_shape(value, std, "gaussian_log_pdf")?;
        let (v, m, s) = (self.value(value), self.value(mean), self.value(std));
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for (((o, &x), &mu), &sd) in out
            .as_mut_slice()
            .iter_mut()
            .zip(v.as_slice())
            .zip(m.as_slice())
            .zip(s.as_slice())
        {
            let z = (x - mu) / sd;
            *o = -HALF_LN_TWO_PI - sd.ln() - 0.5 * z * z;
        }
        let rg = self.needs(&[value, mean, std]);
        Ok(self.push(Op::GaussianLogPdf { value, mean, std }, out, rg))
    }

    /// Exact gradients of the scalar `output` with respect to every leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.value(output).item()?;
        let n = output.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                if self.wants(*x) {
                    let gx = affine_backward_input(&g, self.value(*w));
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) || self.wants(*b) {
                    let (gw, gb) = affine_backward_params(&g, self.value(*x));
                    self.accumulate(grads, *w, gw);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(out, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * stable_sigmoid(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(out, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv / xv);
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| 2.0 * xv * gv);
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), |gv, bv| gv * bv);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), |gv, av| gv * av);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulRow { x, row } => {
                let rv = self.value(*row);
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        for (o, &m) in gx.row_mut(r).iter_mut().zip(rv.as_slice()) {
                            *o *= m;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*row) {
                    let xv = self.value(*x);
                    let mut gr = Matrix::zeros(1, rv.cols());
                    for r in 0..g.rows() {
                        for ((o, &gv), &xval) in gr
                            .as_mut_slice()
                            .iter_mut()
                            .zip(g.row(r))
                            .zip(xv.row(r))
                        {
                            *o += gv * xval;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += cols;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, at } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (&(r, c), &gv) in at.iter().zip(g.as_slice()) {
                    let cur = gx.get(r, c);
                    gx.set(r, c, cur + gv);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                let share = g.as_slice()[0] / (r * c) as f64;
                self.accumulate(grads, *x, Matrix::filled(r, c, share));
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul(&self.value(*b).transpose());
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.value(*a).transpose().matmul(&g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Trace(x) => {
                let n = self.value(*x).rows();
                let mut gx = Matrix::zeros(n, n);
                for i in 0..n {
                    gx.set(i, i, g.as_slice()[0]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GaussianLogPdf { value, mean, std } => {
                let (v, m, s) = (self.value(*value), self.value(*mean), self.value(*std));
                // r = (v - m)/s ; d/dv = -r/s ; d/dm = r/s ; d/ds = (r² - 1)/s
                let mut dv = Matrix::zeros(v.rows(), v.cols());
                let mut ds = Matrix::zeros(v.rows(), v.cols());
                for idx in 0..v.len() {
                    let sd = s.as_slice()[idx];
                    let r = (v.as_slice()[idx] - m.as_slice()[idx]) / sd;
                    let gv = g.as_slice()[idx];
                    dv.as_mut_slice()[idx] = -gv * r / sd;
                    ds.as_mut_slice()[idx] = gv * (r * r - 1.0) / sd;
                }
                if self.wants(*mean) {
                    self.accumulate(grads, *mean, dv.map(|x| -x));
                }
                self.accumulate(grads, *value, dv);
                self.accumulate(grads, *std, ds);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_three() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(t.scalar_value(y).unwrap(), 9.0);
        assert_eq!(g.wrt(x).item().unwrap(), 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let x = t.param(Matrix::scalar(5.0));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).item().unwrap(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gaussian_at_mode_is_half_log_two_pi() {
        let mut t = Tape::new();
        let v = t.constant(Matrix::scalar(1.5));
        let m = t.constant(Matrix::scalar(1.5));
        let s = t.constant(Matrix::scalar(1.0));
        let lp = t.gaussian_log_pdf(v, m, s).unwrap();
        assert!((t.scalar_value(lp).unwrap() + 0.918_938_5).abs() < 1e-7);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!(stable_softplus(800.0).is_finite());
        assert_eq!(stable_softplus(-800.0), 0.0);
        assert_eq!(stable_sigmoid(40.0), 1.0);
        assert!(stable_sigmoid(-800.0) >= 0.0);
    }
}
