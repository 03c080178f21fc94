//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a 1×1 node walks the record in reverse and returns
//! the gradient of that scalar with respect to every parameter leaf.
//!
//! All arithmetic is `f64`. Rows are time steps (or batch items), columns are
//! feature channels.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    ColMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    /// Scalar computed outside the tape whose gradient w.r.t. `x` is known.
    External { x: Var, grad: Mat },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to each parameter that took part in it.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_param: HashMap<ParamId, Mat>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Mat)> {
        self.by_param.iter()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Accumulates `other` into `self`, summing matching entries.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Mat) {
        self.by_param.insert(id, grad);
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// 1×1 nodes only.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter from `store`. Repeated binds of the same id return
    /// the same node so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be 1×n");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with 1×n `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Column-wise maximum over rows, giving a 1×n row. Ties resolve to the
    /// earliest row.
    pub fn col_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut argmax = Vec::with_capacity(xv.ncols());
        let mut out = Mat::zeros((1, xv.ncols()));
        for (j, col) in xv.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out[[0, j]] = col[best];
        }
        let rg = self.rg(x);
        self.push(out, Op::ColMax { x, argmax }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    /// Injects a scalar `value` computed outside the tape, with known
    /// gradient `grad` (same shape as `x`).
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Mat) -> Var {
        assert_eq!(self.value(x).dim(), grad.dim(), "external_scalar: gradient shape");
        let rg = self.rg(x);
        self.push(Mat::from_elem((1, 1), value), Op::External { x, grad }, rg)
    }

    /// Sum of 1×1 nodes with weights. Zero weights are skipped entirely so the
    /// corresponding term is not part of the graph.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if w == 0.0 {
                continue;
            }
            let term = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term),
            });
        }
        acc.unwrap_or_else(|| self.constant(Mat::zeros((1, 1))))
    }

    /// Mean of several 1×1 nodes.
    pub fn mean_scalars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "mean_scalars: empty");
        let w = 1.0 / vars.len() as f64;
        let terms: Vec<_> = vars.iter().map(|v| (w, *v)).collect();
        self.weighted_sum(&terms)
    }

    /// Gradient of the 1×1 node `root` with respect to every bound trainable
    /// parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, contrib: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    // put it back so parameters can be collected below
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        send(*a, g.dot(&bv.t()), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, av.t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        send(*a, g.dot(bv), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, g.t().dot(av), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*row, summed, &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        send(*a, &g * self.value(*b), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, &g * self.value(*a), &mut grads);
                    }
                }
                Op::Scale(a, f) => send(*a, g * *f, &mut grads),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, &g * &y.mapv(|v| v * (1.0 - v)), &mut grads);
                }
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    send(*a, g * d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    let dots = dx.sum_axis(Axis(1));
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        row.scaled_add(-dots[i], &y.row(i));
                    }
                    send(*a, dx, &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let sums = g.sum_axis(Axis(1));
                    let mut dx = g;
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        row.scaled_add(-sums[i], &p.row(i));
                    }
                    send(*a, dx, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.rg(*gamma) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(*gamma, dg, &mut grads);
                    }
                    if self.rg(*beta) {
                        send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    if self.rg(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = xhat.ncols() as f64;
                        let mut dx = Mat::zeros(xhat.dim());
                        for i in 0..xhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let mean_d = dr.sum() / n;
                            let mean_dx = dr.dot(&xr) / n;
                            for j in 0..xhat.ncols() {
                                dx[[i, j]] = rstd[i] * (dr[j] - mean_d - xr[j] * mean_dx);
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::ColMax { x, argmax } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (j, &i) in argmax.iter().enumerate() {
                        dx[[i, j]] += g[[0, j]];
                    }
                    send(*x, dx, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        send(*p, g.slice(s![.., start..start + w]).to_owned(), &mut grads);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        send(*p, g.slice(s![start..start + h, ..]).to_owned(), &mut grads);
                        start += h;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    let w = g.ncols();
                    dx.slice_mut(s![.., *start..*start + w]).assign(&g);
                    send(*x, dx, &mut grads);
                }
                Op::External { x, grad } => {
                    send(*x, grad * g[[0, 0]], &mut grads);
                }
            }
        }

        let mut out = Gradients::default();
        for (id, v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                out.by_param.insert(*id, g);
            }
        }
        out
    }
}
