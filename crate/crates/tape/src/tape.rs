use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops;

use crate::matrix::{gemm_into, matmul, pairwise_sum};
use crate::{Matrix, Real};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Linear(usize, usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    Affine(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Square(usize),
    Recip(usize),
    SumAll(usize),
    RowSum(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Reshape(usize),
    RepeatRows(usize, usize),
    TileRows(usize, usize),
    SumRowGroups(usize, usize),
    Gather(usize, Vec<usize>),
    CumsumExcl(usize),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation eagerly and replays it backwards.
///
/// Every operation computes its value immediately; [`Tape::backward`]
/// walks the recorded nodes in reverse creation order.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var(#{}, {r}x{c})", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Matrix::scalar(value))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: Var<'_, T>, op: Op<T>, f: impl Fn(T) -> T) -> Var<'_, T> {
        let value = self.nodes.borrow()[a.id].value.map(f);
        let rg = self.requires(&[a.id]);
        self.push(value, op, rg)
    }

    fn binary_elementwise(
        &self,
        a: Var<'_, T>,
        b: Var<'_, T>,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Var<'_, T> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            assert_eq!(x.shape(), y.shape(), "elementwise operands differ in shape");
            Matrix::from_vec(
                x.rows,
                x.cols,
                x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            )
        };
        let rg = self.requires(&[a.id, b.id]);
        self.push(value, op, rg)
    }

    /// Concatenate along columns; all parts must have the same row count.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows;
            let cols: usize = parts.iter().map(|p| nodes[p.id].value.cols).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let m = &nodes[p.id].value;
                    assert_eq!(m.rows, rows, "concat operands differ in row count");
                    data.extend_from_slice(m.row(r));
                }
            }
            Matrix::from_vec(rows, cols, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        self.push(value, Op::Concat(ids), rg)
    }

    /// Reverse-mode sweep from a `1×1` output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[output.id].requires_grad {
            return Gradients { grads };
        }
        grads[output.id] = Some(Matrix::scalar(T::one()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Matrix<T>>],
    id: usize,
    contribution: Matrix<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

/// Like [`accumulate`] but builds the contribution lazily so skipped
/// inputs cost nothing.
fn accumulate_with<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Matrix<T>>],
    id: usize,
    f: impl FnOnce() -> Matrix<T>,
) {
    if nodes[id].requires_grad {
        let m = f();
        accumulate(nodes, grads, id, m);
    }
}

fn zip_map<T: Real>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    Matrix::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &Matrix<T>,
    grads: &mut [Option<Matrix<T>>],
) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            accumulate_with(nodes, grads, a, || matmul(g, false, val(b), true));
            accumulate_with(nodes, grads, b, || matmul(val(a), true, g, false));
        }
        Op::Linear(x, w, b) => {
            let (x, w, b) = (*x, *w, *b);
            accumulate_with(nodes, grads, x, || matmul(g, false, val(w), true));
            if nodes[w].requires_grad {
                match &mut grads[w] {
                    Some(existing) => gemm_into(val(x), true, g, false, T::one(), existing),
                    slot @ None => *slot = Some(matmul(val(x), true, g, false)),
                }
            }
            accumulate_with(nodes, grads, b, || g.col_sums());
        }
        Op::Add(a, b) => {
            accumulate_with(nodes, grads, *a, || g.clone());
            accumulate_with(nodes, grads, *b, || g.clone());
        }
        Op::AddRow(a, r) => {
            accumulate_with(nodes, grads, *a, || g.clone());
            accumulate_with(nodes, grads, *r, || g.col_sums());
        }
        Op::Sub(a, b) => {
            accumulate_with(nodes, grads, *a, || g.clone());
            accumulate_with(nodes, grads, *b, || g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            accumulate_with(nodes, grads, a, || zip_map(g, val(b), |p, q| p * q));
            accumulate_with(nodes, grads, b, || zip_map(g, val(a), |p, q| p * q));
        }
        Op::MulCol(a, c) => {
            let (a, c) = (*a, *c);
            accumulate_with(nodes, grads, a, || {
                let cv = val(c);
                Matrix::from_fn(g.rows, g.cols, |r, j| g.get(r, j) * cv.data[r])
            });
            accumulate_with(nodes, grads, c, || {
                let av = val(a);
                Matrix::from_fn(g.rows, 1, |r, _| {
                    g.row(r)
                        .iter()
                        .zip(av.row(r))
                        .fold(T::zero(), |s, (&p, &q)| s + p * q)
                })
            });
        }
        Op::Affine(a, scale) => {
            let s = *scale;
            accumulate_with(nodes, grads, *a, || g.map(|x| x * s));
        }
        Op::Relu(a) => {
            let a = *a;
            accumulate_with(nodes, grads, a, || {
                zip_map(g, val(a), |p, x| if x > T::zero() { p } else { T::zero() })
            });
        }
        Op::Sigmoid(a) => {
            accumulate_with(nodes, grads, *a, || {
                zip_map(g, out, |p, y| p * y * (T::one() - y))
            });
        }
        Op::Softplus(a) => {
            let a = *a;
            accumulate_with(nodes, grads, a, || {
                zip_map(g, val(a), |p, x| p * sigmoid(x))
            });
        }
        Op::Exp(a) => {
            accumulate_with(nodes, grads, *a, || zip_map(g, out, |p, y| p * y));
        }
        Op::Log(a) => {
            let a = *a;
            accumulate_with(nodes, grads, a, || zip_map(g, val(a), |p, x| p / x));
        }
        Op::Abs(a) => {
            let a = *a;
            accumulate_with(nodes, grads, a, || {
                zip_map(g, val(a), |p, x| {
                    if x > T::zero() {
                        p
                    } else if x < T::zero() {
                        -p
                    } else {
                        T::zero()
                    }
                })
            });
        }
        Op::Square(a) => {
            let a = *a;
            let two = T::of(2.0);
            accumulate_with(nodes, grads, a, || zip_map(g, val(a), |p, x| two * x * p));
        }
        Op::Recip(a) => {
            accumulate_with(nodes, grads, *a, || zip_map(g, out, |p, y| -p * y * y));
        }
        Op::SumAll(a) => {
            let a = *a;
            let (r, c) = val(a).shape();
            accumulate_with(nodes, grads, a, || Matrix::filled(r, c, g.data[0]));
        }
        Op::RowSum(a) => {
            let a = *a;
            let (r, c) = val(a).shape();
            accumulate_with(nodes, grads, a, || Matrix::from_fn(r, c, |i, _| g.data[i]));
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let cols = val(p).cols;
                accumulate_with(nodes, grads, p, || {
                    Matrix::from_fn(g.rows, cols, |r, c| g.get(r, offset + c))
                });
                offset += cols;
            }
        }
        Op::SliceCols(a, start) => {
            let (a, start) = (*a, *start);
            let (r, c) = val(a).shape();
            accumulate_with(nodes, grads, a, || {
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    m.row_mut(i)[start..start + g.cols].copy_from_slice(g.row(i));
                }
                m
            });
        }
        Op::SliceRows(a, start) => {
            let (a, start) = (*a, *start);
            let (r, c) = val(a).shape();
            accumulate_with(nodes, grads, a, || {
                let mut m = Matrix::zeros(r, c);
                m.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                m
            });
        }
        Op::Reshape(a) => {
            let a = *a;
            let (r, c) = val(a).shape();
            accumulate_with(nodes, grads, a, || Matrix::from_vec(r, c, g.data.clone()));
        }
        Op::RepeatRows(a, k) => {
            let (a, k) = (*a, *k);
            let (r, c) = val(a).shape();
            accumulate_with(nodes, grads, a, || {
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    let dst = m.row_mut(i);
                    for j in 0..k {
                        for (d, &s) in dst.iter_mut().zip(g.row(i * k + j)) {
                            *d = *d + s;
                        }
                    }
                }
                m
            });
        }
        Op::TileRows(a, k) => {
            let (a, k) = (*a, *k);
            let (r, c) = val(a).shape();
            accumulate_with(nodes, grads, a, || {
                let mut m = Matrix::zeros(r, c);
                for j in 0..k {
                    for i in 0..r {
                        let src = g.row(j * r + i);
                        for (d, &s) in m.row_mut(i).iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                m
            });
        }
        Op::SumRowGroups(a, k) => {
            let (a, k) = (*a, *k);
            let (r, c) = val(a).shape();
            accumulate_with(nodes, grads, a, || {
                Matrix::from_fn(r, c, |i, j| g.get(i / k, j))
            });
        }
        Op::Gather(table, idx) => {
            let table = *table;
            let (r, c) = val(table).shape();
            accumulate_with(nodes, grads, table, || {
                let mut m = Matrix::zeros(r, c);
                for (row, &src) in idx.iter().enumerate() {
                    for (d, &s) in m.row_mut(src).iter_mut().zip(g.row(row)) {
                        *d = *d + s;
                    }
                }
                m
            });
        }
        Op::CumsumExcl(a) => {
            let a = *a;
            accumulate_with(nodes, grads, a, || {
                let mut m = Matrix::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let gr = g.row(i);
                    let dst = m.row_mut(i);
                    let mut suffix = T::zero();
                    for j in (0..g.cols).rev() {
                        dst[j] = suffix;
                        suffix = suffix + gr[j];
                    }
                }
                m
            });
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf handles.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Matrix<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing reached it.
    pub fn take_or_zeros(&mut self, v: Var<'_, T>) -> Matrix<T> {
        let (r, c) = v.shape();
        self.grads
            .get_mut(v.id)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a `1×1` node.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "item() on a non-scalar");
        v.data[0]
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    pub fn matmul(self, b: Var<'t, T>) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            matmul(&nodes[self.id].value, false, &nodes[b.id].value, false)
        };
        let rg = self.tape.requires(&[self.id, b.id]);
        self.tape.push(value, Op::MatMul(self.id, b.id), rg)
    }

    /// `self · weight + bias`, with `bias` a `1×n` row broadcast over rows.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (
                &nodes[self.id].value,
                &nodes[weight.id].value,
                &nodes[bias.id].value,
            );
            assert_eq!(b.shape(), (1, w.cols), "bias must be a 1×n row");
            let mut out = Matrix::zeros(x.rows, w.cols);
            for r in 0..x.rows {
                out.row_mut(r).copy_from_slice(&b.data);
            }
            gemm_into(x, false, w, false, T::one(), &mut out);
            out
        };
        let rg = self.tape.requires(&[self.id, weight.id, bias.id]);
        self.tape
            .push(value, Op::Linear(self.id, weight.id, bias.id), rg)
    }

    /// Adds a `1×n` row to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, r) = (&nodes[self.id].value, &nodes[row.id].value);
            assert_eq!(r.shape(), (1, a.cols));
            Matrix::from_fn(a.rows, a.cols, |i, j| a.get(i, j) + r.data[j])
        };
        let rg = self.tape.requires(&[self.id, row.id]);
        self.tape.push(value, Op::AddRow(self.id, row.id), rg)
    }

    /// Multiplies row `i` by `col[i]` (`col` is `rows×1`).
    pub fn mul_col(self, col: Var<'t, T>) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, c) = (&nodes[self.id].value, &nodes[col.id].value);
            assert_eq!(c.shape(), (a.rows, 1), "mul_col expects a rows×1 column");
            Matrix::from_fn(a.rows, a.cols, |i, j| a.get(i, j) * c.data[i])
        };
        let rg = self.tape.requires(&[self.id, col.id]);
        self.tape.push(value, Op::MulCol(self.id, col.id), rg)
    }

    /// `scale * self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t, T> {
        let (s, c) = (T::of(scale), T::of(shift));
        self.tape
            .unary(self, Op::Affine(self.id, s), move |x| s * x + c)
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        self.affine(s, 0.0)
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t, T> {
        self.affine(-1.0, 1.0)
    }

    pub fn relu(self) -> Var<'t, T> {
        let z = T::zero();
        self.tape
            .unary(self, Op::Relu(self.id), move |x| if x > z { x } else { z })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.tape.unary(self, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.tape.unary(self, Op::Softplus(self.id), softplus)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.tape.unary(self, Op::Exp(self.id), |x| x.exp())
    }

    pub fn ln(self) -> Var<'t, T> {
        self.tape.unary(self, Op::Log(self.id), |x| x.ln())
    }

    pub fn abs(self) -> Var<'t, T> {
        self.tape.unary(self, Op::Abs(self.id), |x| x.abs())
    }

    pub fn square(self) -> Var<'t, T> {
        self.tape.unary(self, Op::Square(self.id), |x| x * x)
    }

    pub fn recip(self) -> Var<'t, T> {
        self.tape.unary(self, Op::Recip(self.id), |x| T::one() / x)
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Matrix::scalar(pairwise_sum(&self.value().data));
        let rg = self.requires_grad();
        self.tape.push(value, Op::SumAll(self.id), rg)
    }

    /// Sums each row into a `rows×1` column.
    pub fn row_sum(self) -> Var<'t, T> {
        let value = {
            let a = self.value();
            Matrix::from_fn(a.rows, 1, |r, _| pairwise_sum(a.row(r)))
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::RowSum(self.id), rg)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t, T> {
        let value = {
            let a = self.value();
            assert!(start + len <= a.cols, "column slice out of range");
            Matrix::from_fn(a.rows, len, |r, c| a.get(r, start + c))
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::SliceCols(self.id, start), rg)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t, T> {
        let value = {
            let a = self.value();
            assert!(start + len <= a.rows, "row slice out of range");
            Matrix::from_vec(
                len,
                a.cols,
                a.data[start * a.cols..(start + len) * a.cols].to_vec(),
            )
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::SliceRows(self.id, start), rg)
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t, T> {
        let value = {
            let a = self.value();
            assert_eq!(a.len(), rows * cols, "reshape changes element count");
            Matrix::from_vec(rows, cols, a.data.clone())
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::Reshape(self.id), rg)
    }

    /// Row `i` becomes rows `i*k .. i*k+k`.
    pub fn repeat_rows(self, k: usize) -> Var<'t, T> {
        let value = {
            let a = self.value();
            let mut data = Vec::with_capacity(a.len() * k);
            for r in 0..a.rows {
                for _ in 0..k {
                    data.extend_from_slice(a.row(r));
                }
            }
            Matrix::from_vec(a.rows * k, a.cols, data)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::RepeatRows(self.id, k), rg)
    }

    /// Stacks `k` copies of the whole matrix.
    pub fn tile_rows(self, k: usize) -> Var<'t, T> {
        let value = {
            let a = self.value();
            let mut data = Vec::with_capacity(a.len() * k);
            for _ in 0..k {
                data.extend_from_slice(&a.data);
            }
            Matrix::from_vec(a.rows * k, a.cols, data)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::TileRows(self.id, k), rg)
    }

    /// Sums consecutive groups of `k` rows; the adjoint of [`Var::repeat_rows`].
    pub fn sum_row_groups(self, k: usize) -> Var<'t, T> {
        let value = {
            let a = self.value();
            assert_eq!(a.rows % k, 0, "row count not divisible by group size");
            let groups = a.rows / k;
            let mut m = Matrix::zeros(groups, a.cols);
            for gi in 0..groups {
                let dst = m.row_mut(gi);
                for j in 0..k {
                    for (d, &s) in dst.iter_mut().zip(a.row(gi * k + j)) {
                        *d = *d + s;
                    }
                }
            }
            m
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::SumRowGroups(self.id, k), rg)
    }

    /// Row `r` of the result is row `idx[r]` of `self`.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t, T> {
        let value = {
            let a = self.value();
            let mut data = Vec::with_capacity(idx.len() * a.cols);
            for &i in idx {
                assert!(i < a.rows, "gather index {i} out of range {}", a.rows);
                data.extend_from_slice(a.row(i));
            }
            Matrix::from_vec(idx.len(), a.cols, data)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::Gather(self.id, idx.to_vec()), rg)
    }

    /// Per-row exclusive prefix sum: `out[i][j] = sum_{l<j} a[i][l]`.
    pub fn cumsum_exclusive(self) -> Var<'t, T> {
        let value = {
            let a = self.value();
            let mut m = Matrix::zeros(a.rows, a.cols);
            for i in 0..a.rows {
                let mut acc = T::zero();
                let src = a.row(i);
                let dst = m.row_mut(i);
                for j in 0..a.cols {
                    dst[j] = acc;
                    acc = acc + src[j];
                }
            }
            m
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::CumsumExcl(self.id), rg)
    }
}

impl<'t, T: Real> ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.tape
            .binary_elementwise(self, rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t, T: Real> ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.tape
            .binary_elementwise(self, rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t, T: Real> ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.tape
            .binary_elementwise(self, rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

pub mod activations {
    //! Scalar versions of the tape's activations.
    use crate::Real;

    pub fn sigmoid<T: Real>(x: T) -> T {
        super::sigmoid(x)
    }

    pub fn softplus<T: Real>(x: T) -> T {
        super::softplus(x)
    }
}
