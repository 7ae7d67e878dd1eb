//! Reverse-mode differentiation over dense matrices.
//!
//! Every value on a [`Tape`] is a `DMatrix<f64>`; scalars are 1×1 matrices.
//! Operations append a node holding the forward value plus whatever the
//! backward pass needs, and [`Tape::gradients`] walks the nodes in reverse
//! to accumulate adjoints. The tape is append-only, so node ids are a valid
//! topological order.

use std::cell::RefCell;
use std::fmt;
use std::ops;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    ScaleBy(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sum(usize),
    Slice { src: usize, row: usize, col: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Broadcast(usize),
    Diag(usize),
    DiagPart(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an input. Parameters and constants are both leaves; the only
    /// difference is whether the caller asks for their gradient.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Mat::from_element(1, 1, value))
    }

    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Mat::from_column_slice(values.len(), 1, values))
    }

    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Mat::from_row_slice(1, values.len(), values))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn with_values<R>(&self, a: usize, b: usize, f: impl FnOnce(&Mat, &Mat) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    fn unary(&self, a: Var<'_>, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let v = self.with_value(a.id, |x| x.map(f));
        self.push(v, op)
    }

    /// Backpropagates from a 1×1 `output`.
    pub fn gradients(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.shape(),
            (1, 1),
            "gradients are taken of scalar outputs"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; output.id + 1];
        grads[output.id] = Some(Mat::from_element(1, 1, 1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.component_mul(val(*b)));
                    accumulate(&mut grads, *b, g.component_mul(val(*a)));
                }
                Op::Neg(a) => accumulate(&mut grads, *a, -&g),
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Offset(a) => accumulate(&mut grads, *a, g.clone()),
                Op::ScaleBy(a, s) => {
                    let s_val = val(*s)[(0, 0)];
                    let ds = g.component_mul(val(*a)).sum();
                    accumulate(&mut grads, *a, &g * s_val);
                    accumulate(&mut grads, *s, Mat::from_element(1, 1, ds));
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, *r, Mat::from_row_slice(1, g.ncols(), g.row_sum().as_slice()));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, &g * val(*b).transpose());
                    accumulate(&mut grads, *b, val(*a).tr_mul(&g));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, g.component_mul(&d));
                }
                Op::Relu(a) => {
                    let d = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, g.component_mul(&d));
                }
                Op::Softplus(a) => {
                    let d = val(*a).map(sigmoid);
                    accumulate(&mut grads, *a, g.component_mul(&d));
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.component_mul(&node.value)),
                Op::Ln(a) => accumulate(&mut grads, *a, g.component_div(val(*a))),
                Op::Square(a) => accumulate(&mut grads, *a, g.component_mul(val(*a)) * 2.0),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::Slice { src, row, col } => {
                    let (r, c) = val(*src).shape();
                    let mut full = Mat::zeros(r, c);
                    full.view_mut((*row, *col), g.shape()).copy_from(&g);
                    accumulate(&mut grads, *src, full);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = val(p).nrows();
                        accumulate(&mut grads, p, g.rows(offset, rows).into_owned());
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = val(p).ncols();
                        accumulate(&mut grads, p, g.columns(offset, cols).into_owned());
                        offset += cols;
                    }
                }
                Op::Broadcast(a) => accumulate(&mut grads, *a, Mat::from_element(1, 1, g.sum())),
                Op::Diag(a) => accumulate(&mut grads, *a, column_of(&g.diagonal())),
                Op::DiagPart(a) => accumulate(&mut grads, *a, Mat::from_diagonal(&g.column(0))),
                Op::Cholesky(a) => {
                    accumulate(&mut grads, *a, cholesky_backward(&node.value, &g));
                }
                Op::SolveLower(l, b) => {
                    // X = L⁻¹B: B̄ = L⁻ᵀX̄, L̄ = −tril(B̄Xᵀ)
                    let lv = val(*l);
                    let gb = lv
                        .tr_solve_lower_triangular(&g)
                        .expect("factor was invertible in the forward pass");
                    let gl = (&gb * node.value.transpose()).lower_triangle() * -1.0;
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *l, gl);
                }
                Op::SolveLowerT(l, b) => {
                    // X = L⁻ᵀB: B̄ = L⁻¹X̄, L̄ = −tril(XB̄ᵀ)
                    let lv = val(*l);
                    let gb = lv
                        .solve_lower_triangular(&g)
                        .expect("factor was invertible in the forward pass");
                    let gl = (&node.value * gb.transpose()).lower_triangle() * -1.0;
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *l, gl);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: usize, g: Mat) {
    match &mut grads[id] {
        Some(existing) => *existing += g,
        slot => *slot = Some(g),
    }
}

/// Adjoint of `A ↦ chol(A)` for symmetric perturbations of `A`.
fn cholesky_backward(l: &Mat, gl: &Mat) -> Mat {
    let mut p = l.tr_mul(&gl.lower_triangle()).lower_triangle();
    for i in 0..p.nrows() {
        p[(i, i)] *= 0.5;
    }
    let y = (&p + p.transpose()) * 0.5;
    let w = l
        .tr_solve_lower_triangular(&y)
        .expect("factor was invertible in the forward pass");
    l.tr_solve_lower_triangular(&w.transpose())
        .expect("factor was invertible in the forward pass")
}

/// Lower Cholesky factor, or the index of the first non-positive pivot.
pub fn cholesky_lower(a: &Mat) -> std::result::Result<Mat, usize> {
    let n = a.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

fn column_of(v: &nalgebra::DVector<f64>) -> Mat {
    Mat::from_column_slice(v.len(), 1, v.as_slice())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Adjoints produced by [`Tape::gradients`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Mat {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Mat::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Mat {
        self.tape.with_value(self.id, Mat::clone)
    }

    /// The value of a 1×1 variable.
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |m| {
            debug_assert_eq!(m.shape(), (1, 1));
            m[(0, 0)]
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.with_value(self.id, Mat::shape)
    }

    fn check_same_shape(self, other: Var<'t>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.tape.with_values(self.id, rhs.id, |a, b| {
            assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
            a * b
        });
        self.tape.push(v, Op::MatMul(self.id, rhs.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, Mat::transpose);
        self.tape.push(v, Op::Transpose(self.id))
    }

    /// Multiplies every entry by the 1×1 variable `s`.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let v = self.tape.with_values(self.id, s.id, |a, s| a * s[(0, 0)]);
        self.tape.push(v, Op::ScaleBy(self.id, s.id))
    }

    /// Adds the 1×c row `row` to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let v = self.tape.with_values(self.id, row.id, |a, r| {
            assert_eq!((1, a.ncols()), r.shape(), "add_row: bias shape");
            let mut out = a.clone();
            for mut out_row in out.row_iter_mut() {
                out_row += r;
            }
            out
        });
        self.tape.push(v, Op::AddRow(self.id, row.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self, f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self, |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self, softplus, Op::Softplus(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self, f64::ln, Op::Ln(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self, |x| x * x, Op::Square(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| Mat::from_element(1, 1, a.sum()));
        self.tape.push(v, Op::Sum(self.id))
    }

    pub fn slice(self, row: usize, col: usize, rows: usize, cols: usize) -> Var<'t> {
        let v = self
            .tape
            .with_value(self.id, |a| a.view((row, col), (rows, cols)).into_owned());
        self.tape.push(
            v,
            Op::Slice {
                src: self.id,
                row,
                col,
            },
        )
    }

    pub fn row_at(self, i: usize) -> Var<'t> {
        let cols = self.shape().1;
        self.slice(i, 0, 1, cols)
    }

    pub fn col_at(self, j: usize) -> Var<'t> {
        let rows = self.shape().0;
        self.slice(0, j, rows, 1)
    }

    /// Expands a 1×1 variable to a `rows × cols` matrix.
    pub fn broadcast(self, rows: usize, cols: usize) -> Var<'t> {
        let v = self
            .tape
            .with_value(self.id, |a| Mat::from_element(rows, cols, a[(0, 0)]));
        self.tape.push(v, Op::Broadcast(self.id))
    }

    /// n×1 column to n×n diagonal matrix.
    pub fn diag(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| {
            assert_eq!(a.ncols(), 1, "diag: expects a column");
            Mat::from_diagonal(&a.column(0))
        });
        self.tape.push(v, Op::Diag(self.id))
    }

    /// Diagonal of a square matrix as an n×1 column.
    pub fn diag_part(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| column_of(&a.diagonal()));
        self.tape.push(v, Op::DiagPart(self.id))
    }

    /// Lower Cholesky factor. On failure the factorization is retried once
    /// with `retry_jitter` added to the diagonal.
    pub fn cholesky(self, retry_jitter: f64) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |a| match cholesky_lower(a) {
            Ok(l) => Ok(l),
            Err(_) => {
                let n = a.nrows();
                let bumped = a + Mat::identity(n, n) * retry_jitter;
                cholesky_lower(&bumped).map_err(|minor| Error::Numerical {
                    minor,
                    detail: format!("matrix not positive definite after jitter {retry_jitter:e}"),
                })
            }
        })?;
        Ok(self.tape.push(value, Op::Cholesky(self.id)))
    }

    /// `L⁻¹ B` for lower-triangular `self`.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let v = self.tape.with_values(self.id, b.id, |l, b| {
            l.solve_lower_triangular(b)
                .expect("triangular factor has a zero pivot")
        });
        self.tape.push(v, Op::SolveLower(self.id, b.id))
    }

    /// `L⁻ᵀ B` for lower-triangular `self`.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        let v = self.tape.with_values(self.id, b.id, |l, b| {
            l.tr_solve_lower_triangular(b)
                .expect("triangular factor has a zero pivot")
        });
        self.tape.push(v, Op::SolveLowerT(self.id, b.id))
    }
}

/// Stacks variables vertically; all must share a column count.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts[0].tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let cols = nodes[parts[0].id].value.ncols();
        let rows: usize = parts.iter().map(|p| nodes[p.id].value.nrows()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            assert_eq!(v.ncols(), cols, "concat_rows: column mismatch");
            out.rows_mut(offset, v.nrows()).copy_from(v);
            offset += v.nrows();
        }
        out
    };
    tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
}

/// Places variables side by side; all must share a row count.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts[0].tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let rows = nodes[parts[0].id].value.nrows();
        let cols: usize = parts.iter().map(|p| nodes[p.id].value.ncols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            assert_eq!(v.nrows(), rows, "concat_cols: row mismatch");
            out.columns_mut(offset, v.ncols()).copy_from(v);
            offset += v.ncols();
        }
        out
    };
    tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(rhs, "add");
        let v = self.tape.with_values(self.id, rhs.id, |a, b| a + b);
        self.tape.push(v, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(rhs, "sub");
        let v = self.tape.with_values(self.id, rhs.id, |a, b| a - b);
        self.tape.push(v, Op::Sub(self.id, rhs.id))
    }
}

/// Elementwise product.
impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(rhs, "mul");
        let v = self
            .tape
            .with_values(self.id, rhs.id, |a, b| a.component_mul(b));
        self.tape.push(v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| -a);
        self.tape.push(v, Op::Neg(self.id))
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| a * c);
        self.tape.push(v, Op::Scale(self.id, c))
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        let v = self.tape.with_value(self.id, |a| a.add_scalar(c));
        self.tape.push(v, Op::Offset(self.id))
    }
}

impl<'t> ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self + (-c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.nrows(), x.ncols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn spd(n: usize, seed: u64) -> Mat {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let b = Mat::from_fn(n, n, |_, _| next());
        &b * b.transpose() + Mat::identity(n, n) * (n as f64) * 0.5
    }

    fn max_rel(a: &Mat, b: &Mat) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let c = tape.scalar(5.0);
        let y = (x * x).sum() + c * 0.0;
        let g = tape.gradients(y);
        assert_eq!(g.wrt(x)[(0, 0)], 6.0);
        assert_eq!(g.wrt(c)[(0, 0)], 0.0);
        let unrelated = tape.scalar(1.0);
        assert_eq!(g.wrt(unrelated)[(0, 0)], 0.0);
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let a0 = Mat::from_row_slice(2, 3, &[0.1, -0.4, 0.7, 1.2, 0.3, -0.9]);
        let b0 = Mat::from_row_slice(3, 2, &[0.5, 0.2, -0.3, 0.8, 0.9, -1.1]);
        let f = |a: &Mat, b: &Mat| -> (f64, Mat, Mat) {
            let tape = Tape::new();
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let prod = av.matmul(bv).tanh();
            let row = tape.row(&[0.3, -0.2]);
            let y = (prod.add_row(row).softplus().ln() + prod.exp().square()).sum();
            let g = tape.gradients(y);
            (y.item(), g.wrt(av), g.wrt(bv))
        };
        let (_, ga, gb) = f(&a0, &b0);
        let na = numeric_grad(&a0, |a| f(a, &b0).0);
        let nb = numeric_grad(&b0, |b| f(&a0, b).0);
        assert!(max_rel(&ga, &na) < 1e-7);
        assert!(max_rel(&gb, &nb) < 1e-7);
    }

    #[test]
    fn slicing_and_concat_gradients() {
        let x0 = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = |x: &Mat| -> (f64, Mat) {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let r0 = xv.row_at(0);
            let c2 = xv.col_at(2);
            let stacked = concat_rows(&[r0, xv.row_at(1) * 2.0]);
            let side = concat_cols(&[c2, c2.square()]);
            let y = stacked.square().sum() + side.matmul(tape.column(&[1.0, 0.5])).sum()
                + xv.slice(1, 1, 1, 1).broadcast(2, 2).sum();
            let g = tape.gradients(y);
            (y.item(), g.wrt(xv))
        };
        let (_, g) = f(&x0);
        let n = numeric_grad(&x0, |x| f(x).0);
        assert!(max_rel(&g, &n) < 1e-7, "{g} vs {n}");
    }

    #[test]
    fn cholesky_and_solve_gradients() {
        let a0 = spd(4, 7);
        let b0 = Mat::from_row_slice(4, 2, &[0.3, -1.0, 0.5, 0.2, -0.7, 0.9, 1.1, 0.4]);
        let f = |a: &Mat, b: &Mat| -> (f64, Mat, Mat) {
            let tape = Tape::new();
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let l = av.cholesky(1e-9).unwrap();
            let x = l.solve_lower_t(l.solve_lower(bv));
            let logdet = l.diag_part().ln().sum() * 2.0;
            let y = (x * bv).sum() + logdet + l.square().sum();
            let g = tape.gradients(y);
            (y.item(), g.wrt(av), g.wrt(bv))
        };
        let (_, ga, gb) = f(&a0, &b0);
        // symmetric perturbations only: perturb (i,j) and (j,i) together
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..=i {
                let mut ap = a0.clone();
                let mut am = a0.clone();
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                if i != j {
                    ap[(j, i)] += h;
                    am[(j, i)] -= h;
                }
                let num = (f(&ap, &b0).0 - f(&am, &b0).0) / (2.0 * h);
                let ana = if i == j { ga[(i, i)] } else { ga[(i, j)] + ga[(j, i)] };
                assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "({i},{j}): {num} vs {ana}");
            }
        }
        let nb = numeric_grad(&b0, |b| f(&a0, b).0);
        assert!(max_rel(&gb, &nb) < 1e-7);
    }

    #[test]
    fn cholesky_reports_failing_minor() {
        let a = Mat::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 2.0, 1.0]);
        assert_eq!(cholesky_lower(&a).unwrap_err(), 2);
        let tape = Tape::new();
        let err = tape.leaf(a).cholesky(1e-6).unwrap_err();
        assert!(matches!(err, Error::Numerical { minor: 2, .. }));
    }

    #[test]
    fn cholesky_retry_rescues_semidefinite() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let tape = Tape::new();
        let l = tape.leaf(a).cholesky(1e-6).unwrap().value();
        assert!((l[(1, 1)] - 2e-6f64.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6, 0.1, 0.7, 2.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-40.0) < 1e-17);
    }
}
