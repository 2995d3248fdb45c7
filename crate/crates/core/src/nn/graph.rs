//! Tape-based reverse-mode differentiation over matrices.
//!
//! A [`Graph`] is built fresh for every optimization step. Each operation
//! appends a node holding its value; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on a
//! gradient-carrying leaf.

use super::tensor::{gemm, sigmoid, softplus, Tensor};
use super::NnError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Softplus(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, or zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(vec![r, c])
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(vec![r, c])
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        left: vec![a.rows(), a.cols()],
        right: vec![b.rows(), b.cols()],
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = (value.rows(), value.cols());
            Tensor::new(vec![r, c], value.into_data()).expect("reshape keeps length")
        };
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMul(a.0, b.0),
            rg,
            "matmul",
        ))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(mismatch("add_bias", ta, tb));
        }
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let v = Tensor::matrix(ta.rows(), n, out)?;
        let rg = self.rg(a.0) || self.rg(bias.0);
        Ok(self.push(v, Op::AddBias(a.0, bias.0), rg, "add_bias"))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(mismatch(name, ta, tb));
        }
        let v = ta.zip(tb, f);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, op, rg, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.nodes[a.0].value.map(f);
        let rg = self.rg(a.0);
        self.push(v, op, rg, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "scale", |x| x * c, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, "exp", f64::exp, Op::Exp(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, "softplus", softplus, Op::Softplus(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, "square", |x| x * x, Op::Square(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg, "mean")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = parts.first().ok_or(NnError::Empty("concat_cols"))?;
        let rows = self.nodes[first.0].value.rows();
        let mut cols = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(mismatch("concat_cols", &self.nodes[first.0].value, t));
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row_slice(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let idx = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatCols(idx),
            rg,
            "concat_cols",
        ))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let t = &self.nodes[a.0].value;
        if start >= end || end > t.cols() {
            return Err(NnError::ShapeMismatch {
                op: "slice_cols",
                left: vec![t.rows(), t.cols()],
                right: vec![start, end],
            });
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let v = Tensor::matrix(t.rows(), end - start, out)?;
        let rg = self.rg(a.0);
        Ok(self.push(v, Op::SliceCols(a.0, start), rg, "slice_cols"))
    }

    /// Rows of `a` selected by `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NnError> {
        let t = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            if i >= t.rows() {
                return Err(NnError::ShapeMismatch {
                    op: "gather_rows",
                    left: vec![t.rows(), t.cols()],
                    right: vec![i],
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor::matrix(indices.len(), t.cols(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(v, Op::GatherRows(a.0, indices.to_vec()), rg, "gather_rows"))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::NoForward);
        }
        if let Some((idx, op)) = self.first_non_finite {
            if idx <= loss.0 {
                return Err(NnError::NonFinite { op });
            }
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::NotScalar(vec![lv.rows(), lv.cols()]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let acc = |grads: &mut Vec<Option<Tensor>>, j: usize, t: Tensor| {
                if !self.nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                        acc(&mut grads, *a, Tensor::matrix(m, k, ga)?);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                        acc(&mut grads, *b, Tensor::matrix(k, n, gb)?);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.rg(*b) {
                        let n = g.cols();
                        let mut gb = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *b, Tensor::matrix(1, n, gb)?);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc(&mut grads, *a, g.zip(tb, |x, y| x * y));
                    acc(&mut grads, *b, g.zip(ta, |x, y| x * y));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| x * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Exp(a) => acc(&mut grads, *a, g.zip(&node.value, |x, y| x * y)),
                Op::Softplus(a) => {
                    let ta = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.zip(ta, |x, y| x * sigmoid(y)));
                }
                Op::Square(a) => {
                    let ta = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.zip(ta, |x, y| 2.0 * x * y));
                }
                Op::Sum(a) => {
                    let ta = &self.nodes[*a].value;
                    acc(&mut grads, *a, Tensor::filled(vec![ta.rows(), ta.cols()], g.item()));
                }
                Op::Mean(a) => {
                    let ta = &self.nodes[*a].value;
                    let v = g.item() / ta.len() as f64;
                    acc(&mut grads, *a, Tensor::filled(vec![ta.rows(), ta.cols()], v));
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.cols();
                        if self.rg(p) {
                            let mut gp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                gp.extend_from_slice(&g.row_slice(r)[offset..offset + c]);
                            }
                            acc(&mut grads, p, Tensor::matrix(rows, c, gp)?);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = &self.nodes[*a].value;
                    let (rows, cols, w) = (ta.rows(), ta.cols(), g.cols());
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        ga[r * cols + start..r * cols + start + w].copy_from_slice(g.row_slice(r));
                    }
                    acc(&mut grads, *a, Tensor::matrix(rows, cols, ga)?);
                }
                Op::GatherRows(a, indices) => {
                    let ta = &self.nodes[*a].value;
                    let cols = ta.cols();
                    let mut ga = vec![0.0; ta.rows() * cols];
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, v) in ga[i * cols..(i + 1) * cols].iter_mut().zip(g.row_slice(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(ta.rows(), cols, ga)?);
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| (n.value.rows(), n.value.cols()))
            .collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_param() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(&[1.0, -2.0, 0.5]));
        let sq = g.square(p);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(NnError::NoForward)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(NnError::NotScalar(_))));
    }

    #[test]
    fn nan_propagation_is_reported() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(&[f64::MAX]));
        let e = g.exp(p);
        let z = g.scale(e, 0.0);
        let loss = g.sum(z);
        assert!(matches!(g.backward(loss), Err(NnError::NonFinite { op: "exp" })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(&[3.0]));
        let p = g.param(Tensor::row(&[2.0]));
        let m = g.mul(c, p).unwrap();
        let loss = g.sum(m);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(p).data(), &[3.0]);
    }

    #[test]
    fn gather_rows_scatters_gradients() {
        let mut g = Graph::new();
        let p = g.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = g.gather_rows(p, &[1, 1, 0]).unwrap();
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
