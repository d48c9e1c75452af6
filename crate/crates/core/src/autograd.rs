//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value. [`Graph::backward`] walks the tape in reverse and returns
//! [`Gradients`] for every node that depends on a trainable parameter or a
//! differentiable input. Parameters are pulled in through [`Graph::param`];
//! each parameter gets exactly one node per graph, so weights used several
//! times accumulate their gradient in one place.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Row-major boolean mask; `true` marks an allowed attention edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Recip(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { x: Var, index: Rc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The graph node for a stored parameter. Frozen parameters become
    /// constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Leaf, self.store.is_trainable(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// `a[m, n] + row[1, n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row shape mismatch");
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (x, y) in value.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a[m, n] ∘ row[1, n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row shape mismatch");
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (x, y) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= y;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `a * s` where `s` is `[1, 1]`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a, s]);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(&[a]);
        self.push(value, Op::Recip(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise softmax. Masked-out entries get probability exactly zero; a
    /// row with no allowed entry is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<Rc<AttnMask>>) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape();
        if let Some(mask) = &mask {
            assert_eq!(mask.shape(), (m, n), "softmax mask shape mismatch");
        }
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let ok = |j: usize| mask.as_ref().map_or(true, |mk| mk.allowed(i, j));
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            let o = out.row_mut(i);
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    let e = libm::exp(v - max);
                    o[j] = e;
                    total += e;
                }
            }
            for (j, v) in o.iter_mut().enumerate() {
                if ok(j) {
                    *v /= total;
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let lse = log_sum_exp(row);
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Matrix::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Flat gather: `out.flat[i] = a.flat[index[i]]`, reshaped to `rows x cols`.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index/shape mismatch");
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let ng = self.ng(&[a]);
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::Gather { x: a, index },
            ng,
        )
    }

    /// Copies the listed rows (in order, repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (_, n) = self.shape(a);
        let mut index = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            index.extend(r * n..(r + 1) * n);
        }
        self.gather(a, Rc::new(index), rows.len(), n)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(a, &rows)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        let mut index = Vec::with_capacity(m * len);
        for i in 0..m {
            index.extend(i * n + start..i * n + start + len);
        }
        self.gather(a, Rc::new(index), m, len)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let mats: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Matrix::vstack(&mats);
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), m, "concat_cols row mismatch");
            for i in 0..m {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(&[a]);
        self.push(Matrix::row_vector(out), Op::MeanRows(a), ng)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Matrix::zeros(m, n);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_EPS);
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::L2NormalizeRows { x: a, norms }, ng)
    }

    /// Summed binary cross-entropy of sigmoid(logits) against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len(), "bce target length mismatch");
        let loss: f64 = z
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| bce_logit(z, y))
            .sum();
        let ng = self.ng(&[logits]);
        self.push(
            Matrix::scalar(loss),
            Op::BceWithLogits { logits, targets },
            ng,
        )
    }

    /// Runs the reverse pass from a scalar node.
    ///
    /// # Panics
    /// If `loss` is not `[1, 1]`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if ng(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if ng(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if ng(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(*a, hadamard(g, self.value(*b)));
                }
                if ng(*b) {
                    acc(*b, hadamard(g, self.value(*a)));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if ng(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        for (x, y) in d.row_mut(i).iter_mut().zip(r.data()) {
                            *x *= y;
                        }
                    }
                    acc(*a, d);
                }
                if ng(*row) {
                    acc(*row, column_sums(&hadamard(g, self.value(*a))));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                if ng(*a) {
                    acc(*a, g.map(|x| x * k));
                }
                if ng(*s) {
                    acc(*s, Matrix::scalar(hadamard(g, self.value(*a)).sum()));
                }
            }
            Op::Recip(a) => {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *x *= -y * y;
                }
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                for (x, &inp) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if inp <= 0.0 {
                        *x = 0.0;
                    }
                }
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                for (x, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *x *= y * (1.0 - y);
                }
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                for (x, &inp) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x *= gelu_grad(inp);
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gr = g.row(i);
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(y.row(i)).zip(gr) {
                        *o = gv - libm::exp(yv) * gsum;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[i] * (gv - gmean - yv * gy);
                    }
                }
                acc(*x, d);
            }
            Op::Gather { x, index } => {
                let (m, n) = self.shape(*x);
                let mut d = Matrix::zeros(m, n);
                let dd = d.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dd[i] += gv;
                }
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (m, n) = self.shape(p);
                    if ng(p) {
                        let slice = g.data()[off * n..(off + m) * n].to_vec();
                        acc(p, Matrix::from_vec(m, n, slice));
                    }
                    off += m;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (m, n) = self.shape(p);
                    if ng(p) {
                        let mut d = Matrix::zeros(m, n);
                        for i in 0..m {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + n]);
                        }
                        acc(p, d);
                    }
                    off += n;
                }
            }
            Op::SumAll(a) => {
                let (m, n) = self.shape(*a);
                acc(*a, Matrix::filled(m, n, g.item()));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.shape(*a);
                let mut d = Matrix::zeros(m, n);
                for i in 0..m {
                    for (o, &gv) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *o = gv / m as f64;
                    }
                }
                acc(*a, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norms[i];
                    }
                }
                acc(*x, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let k = g.item();
                let data = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zv, &y)| k * (sigmoid(zv) - y))
                    .collect();
                acc(*logits, Matrix::from_vec(z.rows(), z.cols(), data));
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to any node, `None` when it does not depend on
    /// a differentiable leaf or is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.param_vars
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(move |(i, v)| v.and_then(|v| self.wrt(v)).map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|(_, g)| g.is_finite())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Matrix::row_vector(out)
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable `-(y ln σ(z) + (1-y) ln(1-σ(z)))`.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + libm::log1p(libm::exp(-libm::fabs(z)))
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
