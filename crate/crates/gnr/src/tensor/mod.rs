//! Reverse-mode automatic differentiation on dense 2-D tensors.
//!
//! The graph is rebuilt per example (define-by-run): ops append nodes to a
//! [`Graph`] and return lightweight [`Var`] handles. `backward` sweeps the
//! tape in reverse, accumulating gradients; gradients of parameters are then
//! flushed into a [`ParameterStore`] shared across graphs.

mod lstm;
mod rng;
mod store;

pub mod checkpoint;

pub use lstm::{
    affine, bi_lstm_stack, define_lstm, define_mlp, lstm_params, lstm_step, mlp2, mlp_params,
    BiLstmLayer, LstmParams, MlpParams,
};
pub use rng::RngStream;
pub use store::{Init, Parameter, ParameterStore, WeightNoise};

use std::cell::RefCell;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("dropout rate {0} must lie in [0, 1)")]
    InvalidRate(f64),
    #[error("noise sigma {0} must be non-negative")]
    NegativeSigma(f64),
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a 1x1 loss, got {0}")]
    NonScalarLoss(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSumExp(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize },
    Row { src: Var, index: usize },
    SumAll(Var),
    Dropout { src: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// A define-by-run computation tape.
///
/// Values live on the nodes; gradients live in a parallel buffer so the
/// backward sweep can read node values while mutating gradients.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Vec<f64>>>,
    bindings: RefCell<Vec<(Var, String)>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, values.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        self.grads.borrow_mut().push(vec![0.0; values.len()]);
        nodes.push(Node {
            rows,
            cols,
            values,
            op,
        });
        Var(id)
    }

    /// New constant/input node.
    pub fn leaf(&self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                lhs: format!("{rows}x{cols}"),
                rhs: format!("{} values", values.len()),
            });
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    pub fn row_leaf(&self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.push(1, n, values, Op::Leaf)
    }

    pub fn scalar_leaf(&self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Leaf)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    /// Injects a named parameter's current values and records the binding so
    /// [`Graph::flush_param_grads`] can push gradients back into the store.
    pub fn param(&self, store: &ParameterStore, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        let var = self.push(p.rows, p.cols, p.values.clone(), Op::Leaf);
        self.bindings.borrow_mut().push((var, name.to_string()));
        Ok(var)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].rows, nodes[v.0].cols)
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].values.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].values[0]
    }

    pub fn grad(&self, v: Var) -> Vec<f64> {
        self.grads.borrow()[v.0].clone()
    }

    // ---- forward ops ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, values) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.cols != nb.rows {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape_str(),
                    rhs: nb.shape_str(),
                });
            }
            let (m, k, n) = (na.rows, na.cols, nb.cols);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let a_ip = na.values[i * k + p];
                    if a_ip != 0.0 {
                        let brow = &nb.values[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += a_ip * bv;
                        }
                    }
                }
            }
            (m, k, n, out)
        };
        let _ = k;
        Ok(self.push(m, n, values, Op::Matmul(a, b)))
    }

    fn elementwise(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (rows, cols, values) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.rows != nb.rows || na.cols != nb.cols {
                return Err(TensorError::ShapeMismatch {
                    op: op_name,
                    lhs: na.shape_str(),
                    rhs: nb.shape_str(),
                });
            }
            let values = na
                .values
                .iter()
                .zip(&nb.values)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (na.rows, na.cols, values)
        };
        Ok(self.push(rows, cols, values, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (rows, cols, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (
                na.rows,
                na.cols,
                na.values.iter().map(|&x| c * x).collect(),
            )
        };
        self.push(rows, cols, values, Op::Scale(a, c))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (rows, cols, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.rows, na.cols, na.values.iter().map(|&x| f(x)).collect())
        };
        self.push(rows, cols, values, op)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Row-wise softmax, computed with max subtraction.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let (rows, cols, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.len() == 0 {
                return Err(TensorError::Empty { op: "softmax" });
            }
            let mut out = vec![0.0; na.len()];
            for r in 0..na.rows {
                let row = &na.values[r * na.cols..(r + 1) * na.cols];
                softmax_into(row, &mut out[r * na.cols..(r + 1) * na.cols]);
            }
            (na.rows, na.cols, out)
        };
        Ok(self.push(rows, cols, values, Op::Softmax(a)))
    }

    /// log(sum(exp(a))) over a single-row vector; returns a 1x1 node whose
    /// gradient w.r.t. the input is softmax(a).
    pub fn log_sum_exp(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.len() == 0 {
                return Err(TensorError::Empty { op: "log_sum_exp" });
            }
            if na.rows != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "log_sum_exp",
                    lhs: na.shape_str(),
                    rhs: "1xN".to_string(),
                });
            }
            log_sum_exp_slice(&na.values)
        };
        Ok(self.push(1, 1, vec![value], Op::LogSumExp(a)))
    }

    /// Concatenate along columns; all inputs must share the row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_cols" });
        }
        let (rows, cols, values) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].rows;
            let mut cols = 0;
            for v in parts {
                if nodes[v.0].rows != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[parts[0].0].shape_str(),
                        rhs: nodes[v.0].shape_str(),
                    });
                }
                cols += nodes[v.0].cols;
            }
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in parts {
                    let n = &nodes[v.0];
                    out.extend_from_slice(&n.values[r * n.cols..(r + 1) * n.cols]);
                }
            }
            (rows, cols, out)
        };
        Ok(self.push(rows, cols, values, Op::ConcatCols(parts.to_vec())))
    }

    /// Stack along rows; all inputs must share the column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_rows" });
        }
        let (rows, cols, values) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].cols;
            let mut rows = 0;
            let mut out = Vec::new();
            for v in parts {
                if nodes[v.0].cols != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: nodes[parts[0].0].shape_str(),
                        rhs: nodes[v.0].shape_str(),
                    });
                }
                rows += nodes[v.0].rows;
                out.extend_from_slice(&nodes[v.0].values);
            }
            (rows, cols, out)
        };
        Ok(self.push(rows, cols, values, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if start + len > na.cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "slice_cols",
                    index: start + len,
                    bound: na.cols,
                });
            }
            let mut out = Vec::with_capacity(na.rows * len);
            for r in 0..na.rows {
                out.extend_from_slice(&na.values[r * na.cols + start..r * na.cols + start + len]);
            }
            (na.rows, out)
        };
        Ok(self.push(rows, len, values, Op::SliceCols { src: a, start }))
    }

    pub fn row(&self, a: Var, index: usize) -> Result<Var> {
        let (cols, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if index >= na.rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "row",
                    index,
                    bound: na.rows,
                });
            }
            (
                na.cols,
                na.values[index * na.cols..(index + 1) * na.cols].to_vec(),
            )
        };
        Ok(self.push(1, cols, values, Op::Row { src: a, index }))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0].values.iter().sum();
        self.push(1, 1, vec![total], Op::SumAll(a))
    }

    /// Inverted dropout: keeps entries with probability `1 - rate` and scales
    /// survivors by `1/(1-rate)`. Identity when `rate == 0` or not training.
    pub fn dropout(&self, a: Var, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let (rows, cols, mask, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let mask: Vec<f64> = (0..na.len())
                .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                .collect();
            let values = na.values.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (na.rows, na.cols, mask, values)
        };
        Ok(self.push(rows, cols, values, Op::Dropout { src: a, mask }))
    }

    // ---- backward ----

    /// Accumulate d(loss)/d(node) for every node reachable from `loss`.
    /// Gradients from shared subexpressions add up; unreachable nodes are
    /// left at zero.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let mut grads = self.grads.borrow_mut();
        {
            let ln = &nodes[loss.0];
            if ln.rows != 1 || ln.cols != 1 {
                return Err(TensorError::NonScalarLoss(ln.shape_str()));
            }
        }
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = std::mem::take(&mut grads[i]);
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let na = &nodes[a.0];
                    let nb = &nodes[b.0];
                    let (m, k, n) = (na.rows, na.cols, nb.cols);
                    {
                        let ga = &mut grads[a.0];
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                let grow = &g[r * n..(r + 1) * n];
                                let brow = &nb.values[p * n..(p + 1) * n];
                                for (gv, bv) in grow.iter().zip(brow) {
                                    s += gv * bv;
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    }
                    {
                        let gb = &mut grads[b.0];
                        for r in 0..m {
                            for p in 0..k {
                                let a_rp = na.values[r * k + p];
                                if a_rp != 0.0 {
                                    let grow = &g[r * n..(r + 1) * n];
                                    let gbrow = &mut gb[p * n..(p + 1) * n];
                                    for (gbv, gv) in gbrow.iter_mut().zip(grow) {
                                        *gbv += a_rp * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g, 1.0);
                    accumulate(&mut grads[b.0], &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g, 1.0);
                    accumulate(&mut grads[b.0], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let bv = nodes[b.0].values.clone();
                    let av = nodes[a.0].values.clone();
                    for (ga, (gv, x)) in grads[a.0].iter_mut().zip(g.iter().zip(&bv)) {
                        *ga += gv * x;
                    }
                    for (gb, (gv, x)) in grads[b.0].iter_mut().zip(g.iter().zip(&av)) {
                        *gb += gv * x;
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g, *c),
                Op::Sigmoid(a) => {
                    for (ga, (gv, &y)) in grads[a.0].iter_mut().zip(g.iter().zip(&node.values)) {
                        *ga += gv * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    for (ga, (gv, &y)) in grads[a.0].iter_mut().zip(g.iter().zip(&node.values)) {
                        *ga += gv * (1.0 - y * y);
                    }
                }
                Op::Relu(a) => {
                    let xs = &nodes[a.0].values;
                    for (ga, (gv, &x)) in grads[a.0].iter_mut().zip(g.iter().zip(xs)) {
                        if x > 0.0 {
                            *ga += gv;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let cols = node.cols;
                    let ga = &mut grads[a.0];
                    for r in 0..node.rows {
                        let y = &node.values[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    let xs = &nodes[a.0].values;
                    let mut sm = vec![0.0; xs.len()];
                    softmax_into(xs, &mut sm);
                    for (ga, &p) in grads[a.0].iter_mut().zip(&sm) {
                        *ga += g[0] * p;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let cols = node.cols;
                    let mut offset = 0;
                    for v in parts {
                        let pc = nodes[v.0].cols;
                        let gp = &mut grads[v.0];
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            for (dst, sv) in gp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *dst += sv;
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for v in parts {
                        let len = nodes[v.0].len();
                        accumulate(&mut grads[v.0], &g[offset..offset + len], 1.0);
                        offset += len;
                    }
                }
                Op::SliceCols { src, start } => {
                    let sc = nodes[src.0].cols;
                    let gp = &mut grads[src.0];
                    for r in 0..node.rows {
                        let grow = &g[r * node.cols..(r + 1) * node.cols];
                        for (c, gv) in grow.iter().enumerate() {
                            gp[r * sc + start + c] += gv;
                        }
                    }
                }
                Op::Row { src, index } => {
                    let sc = nodes[src.0].cols;
                    accumulate(&mut grads[src.0][index * sc..(index + 1) * sc], &g, 1.0);
                }
                Op::SumAll(a) => {
                    for ga in grads[a.0].iter_mut() {
                        *ga += g[0];
                    }
                }
                Op::Dropout { src, mask } => {
                    for (ga, (gv, m)) in grads[src.0].iter_mut().zip(g.iter().zip(mask)) {
                        *ga += gv * m;
                    }
                }
            }
            grads[i] = g;
        }
        Ok(())
    }

    /// Add this graph's parameter gradients into the store's accumulators.
    pub fn flush_param_grads(&self, store: &mut ParameterStore) -> Result<()> {
        let grads = self.grads.borrow();
        for (var, name) in self.bindings.borrow().iter() {
            store.accumulate_grad(name, &grads[var.0])?;
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

pub(crate) fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Max-stabilized log(sum(exp(xs))) over a plain slice.
pub fn log_sum_exp_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}
