//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes, so
//! the reverse sweep is a single pass from the loss back to index zero.
//! Parameters are borrowed from a [`ParamStore`] rather than copied.

use crate::error::NeuroError;
use crate::params::{ParamId, ParamStore};
use crate::special::{digamma, ln_gamma, trigamma};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    /// tanh approximation of GELU.
    Gelu,
    Tanh,
    Softplus,
    Exp,
    Ln,
    LnGamma,
    Digamma,
    Square,
    Abs,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::SoftmaxRows(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Clamp(a, _, _) => vec![*a],
            Op::LayerNormRows { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Gradients for every entry of a [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tensors: store.zeros_like(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; only inputs can be differentiated.
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node on a tape without a store").get(*id),
            (None, _) => unreachable!("non-param node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var, NeuroError> {
        let id = self
            .params
            .ok_or_else(|| NeuroError::UnknownParam(name.to_string()))?
            .id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: {m}x{k} · {k2}x{n}");
        let mut out = Tensor::zeros(m, n);
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, out.data_mut());
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt: {m}x{k} · ({n}x{k2})ᵀ");
        let mut out = Tensor::zeros(m, n);
        matmul_bt_into(self.value(a).data(), self.value(b).data(), m, k, n, out.data_mut());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Broadcast-add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_rows(self.value(a), self.value(row), |x, r| x + r);
        self.push(out, Op::AddRow(a, row))
    }

    /// Broadcast-multiply every row of `a` by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_rows(self.value(a), self.value(row), |x, r| x * r);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.value(a).map(|x| unary_forward(kind, x));
        self.push(out, Op::Unary(a, kind))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.set(r, c, e);
                z += e;
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / z);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (c, &v) in row.iter().enumerate() {
                out.set(r, c, (v - mean) * is);
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows { x: a, inv_std })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        assert!(start + len <= x.rows());
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::from_vec(len, cols, data), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        assert!(start + len <= cols);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(Tensor::from_vec(rows, len, data), Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                for (c, &v) in t.row(r).iter().enumerate() {
                    out.set(r, offset + c, v);
                }
            }
            offset += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), f64::min);
        self.push(out, Op::Minimum(a, b))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// `x · W + b` for a row-batch `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Gradient of every node with respect to the scalar `loss`.
    ///
    /// Entries are `None` for nodes the loss does not depend on.
    pub fn backward_nodes(&self, loss: Var) -> Result<Vec<Option<Tensor>>, NeuroError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(NeuroError::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(NeuroError::GraphCycle {
                        node: i,
                        input: input.0,
                    });
                }
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Parameter gradients of `loss`; parameters off the loss path get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NeuroError> {
        let store = self
            .params
            .ok_or_else(|| NeuroError::UnknownParam("<tape has no parameter store>".into()))?;
        let mut node_grads = self.backward_nodes(loss)?;
        let mut out = Gradients::zeros_like(store);
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = node_grads[v.0].take() {
                    out.tensors[pid] = g;
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = bv.cols();
                let mut ga = Tensor::zeros(m, k);
                matmul_bt_into(g.data(), bv.data(), m, n, k, ga.data_mut());
                accumulate(grads, *a, ga);
                let mut gb = Tensor::zeros(k, n);
                matmul_at_into(av.data(), g.data(), m, k, n, gb.data_mut());
                accumulate(grads, *b, gb);
            }
            Op::MatMulBt(a, b) => {
                // y = a bᵀ, a: m×k, b: n×k, g: m×n
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = bv.rows();
                let mut ga = Tensor::zeros(m, k);
                matmul_into(g.data(), bv.data(), m, n, k, ga.data_mut());
                accumulate(grads, *a, ga);
                let mut gb = Tensor::zeros(n, k);
                matmul_at_into(g.data(), av.data(), m, n, k, gb.data_mut());
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row);
                accumulate(grads, *a, broadcast_rows(g, rv, |x, r| x * r));
                accumulate(grads, *row, column_sums(&g.zip_map(av, |x, y| x * y)));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let xv = self.value(*a);
                let mut ga = Tensor::zeros(xv.rows(), xv.cols());
                for (((o, &gx), &x), &yy) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()).zip(y.data()) {
                    *o = gx * unary_derivative(*kind, x, yy);
                }
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = y.shape();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (rows, cols) = y.shape();
                let n = cols as f64;
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        ga.set(r, c, inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy));
                    }
                }
                accumulate(grads, *x, ga);
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for (c, &v) in g.row(r).iter().enumerate() {
                        ga.set(r, start + c, v);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(grads, p, Tensor::from_vec(rows, cols, data));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    let mut gp = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gp.set(r, c, g.get(r, offset + c));
                        }
                    }
                    accumulate(grads, p, gp);
                    offset += cols;
                }
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                accumulate(grads, *a, Tensor::filled(rows, cols, g.item()));
            }
            Op::Mean(a) => {
                let (rows, cols) = self.shape(*a);
                let n = (rows * cols) as f64;
                accumulate(grads, *a, Tensor::filled(rows, cols, g.item() / n));
            }
            Op::Minimum(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let mut gb = Tensor::zeros(av.rows(), av.cols());
                for k in 0..av.len() {
                    if av.data()[k] <= bv.data()[k] {
                        ga.data_mut()[k] = g.data()[k];
                    } else {
                        gb.data_mut()[k] = g.data()[k];
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                let ga = g.zip_map(av, |gx, x| if x >= *lo && x <= *hi { gx } else { 0.0 });
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_rows(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = a.shape();
    assert_eq!(row.shape(), (1, cols), "row broadcast shape mismatch");
    let r = row.data();
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        for c in 0..cols {
            out.set(i, c, f(a.get(i, c), r[c]));
        }
    }
    out
}

fn column_sums(g: &Tensor) -> Tensor {
    let (rows, cols) = g.shape();
    let mut out = Tensor::zeros(1, cols);
    for r in 0..rows {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        Unary::Tanh => x.tanh(),
        Unary::Softplus => softplus(x),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::LnGamma => ln_gamma(x),
        Unary::Digamma => digamma(x),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Gelu => {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::LnGamma => digamma(x),
        Unary::Digamma => trigamma(x),
        Unary::Square => 2.0 * x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let map: BTreeMap<String, Tensor> = entries.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        ParamStore::from_map(map)
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_the_vector() {
        let v = Tensor::row_vector(vec![1.5, -2.0, 0.25]);
        let ps = store(&[("v", v.clone())]);
        let mut tape = Tape::with_params(&ps);
        let pv = tape.param_by_name("v").unwrap();
        let sq = tape.square(pv);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.tensors[0].data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn parameters_off_the_loss_path_get_zero_gradients() {
        let ps = store(&[
            ("a", Tensor::row_vector(vec![1.0, 2.0])),
            ("b", Tensor::row_vector(vec![3.0, 4.0])),
        ]);
        let mut tape = Tape::with_params(&ps);
        let a = tape.param_by_name("a").unwrap();
        let b = tape.param_by_name("b").unwrap();
        let _unused = tape.square(b);
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.tensors[0].data(), &[1.0, 1.0]);
        assert_eq!(grads.tensors[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward_nodes(x), Err(NeuroError::NonScalarLoss(1, 2))));
    }

    /// Central differences through every op against the reverse sweep.
    #[test]
    fn every_op_matches_finite_differences() {
        let a0 = Tensor::from_vec(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64) * 0.13 - 0.6).collect());
        let b0 = Tensor::from_vec(4, 2, (0..8).map(|i| ((i * 5 % 7) as f64) * 0.21 - 0.4).collect());
        let r0 = Tensor::row_vector(vec![0.3, -0.2, 0.7, 1.1]);
        let build = |tape: &mut Tape, a: Var, b: Var, r: Var| -> Var {
            let ab = tape.matmul(a, b); // 3x2
            let abt = tape.matmul_bt(a, a); // 3x3
            let sm = tape.softmax_rows(abt);
            let ln = tape.layer_norm_rows(a, 1e-5);
            let scaled = tape.mul_row(ln, r);
            let shifted = tape.add_row(scaled, r);
            let g = tape.gelu(shifted);
            let t = tape.tanh(ab);
            let sp = tape.softplus(t);
            let e = tape.exp(sp);
            let lg_in = tape.add_scalar(e, 1.0);
            let lg = tape.unary(lg_in, Unary::LnGamma);
            let dg = tape.unary(lg_in, Unary::Digamma);
            let l = tape.ln(lg_in);
            let m = tape.mul(lg, dg);
            let s1 = tape.sub(m, l);
            let top = tape.slice_rows(g, 1, 2);
            let left = tape.slice_cols(top, 0, 2);
            let cat = tape.concat_rows(&[left, s1]);
            let cc = tape.concat_cols(&[cat, cat]);
            let mn = tape.minimum(cc, cc);
            let cl = tape.clamp(sm, 0.2, 0.8);
            let sq = tape.square(mn);
            let s_a = tape.sum(sq);
            let s_b = tape.mean(cl);
            let s_c = tape.scale(s_b, 3.0);
            let ab2 = tape.abs(t);
            let s_d = tape.sum(ab2);
            let tot = tape.add(s_a, s_c);
            tape.add(tot, s_d)
        };
        let eval = |a: &Tensor, b: &Tensor, r: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let av = tape.input(a.clone());
            let bv = tape.input(b.clone());
            let rv = tape.input(r.clone());
            let out = build(&mut tape, av, bv, rv);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let av = tape.input(a0.clone());
        let bv = tape.input(b0.clone());
        let rv = tape.input(r0.clone());
        let out = build(&mut tape, av, bv, rv);
        let grads = tape.backward_nodes(out).unwrap();
        let h = 1e-6;
        for (var, base, which) in [(av, &a0, 0), (bv, &b0, 1), (rv, &r0, 2)] {
            let analytic = grads[var.index()].clone().unwrap();
            for k in 0..base.len() {
                let mut plus = base.clone();
                plus.data_mut()[k] += h;
                let mut minus = base.clone();
                minus.data_mut()[k] -= h;
                let (fp, fm) = match which {
                    0 => (eval(&plus, &b0, &r0), eval(&minus, &b0, &r0)),
                    1 => (eval(&a0, &plus, &r0), eval(&a0, &minus, &r0)),
                    _ => (eval(&a0, &b0, &plus), eval(&a0, &b0, &minus)),
                };
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic.data()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0),
                    "input {which} element {k}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
