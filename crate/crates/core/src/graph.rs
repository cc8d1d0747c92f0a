//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the inputs it was computed from. [`Graph::backward`] walks the tape
//! in reverse, seeded with upstream gradients on any set of nodes, so a
//! caller can inject gradients computed elsewhere (the batch-level
//! contrastive loss does exactly that).
//!
//! Nodes built only from constants are marked as not requiring a
//! gradient and are skipped during the reverse sweep.

use std::borrow::Cow;

use crate::params::{ParamId, ParameterStore};
use crate::tensor::{gemm, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `a + row`, with the `1×c` row broadcast over every row of `a`.
    AddRow(Var, Var),
    RepeatRows(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Ln(Var),
    /// Keeps `tanh` of the inner polynomial for the reverse sweep.
    Gelu(Var, Vec<f64>),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumRows(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    Cosine(Var, Var),
    Nll {
        logits: Var,
        target: usize,
        probs: Tensor,
        clamped: bool,
    },
}

struct Node<'s> {
    /// Parameters borrow their value from the store.
    value: Cow<'s, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: Option<&'s ParameterStore>,
    nodes: Vec<Node<'s>>,
    param_nodes: Vec<Option<Var>>,
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter the tape touched.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.param_nodes.iter().enumerate().filter_map(|(id, node)| {
            let node = (*node)?;
            self.grads[node.0].as_ref().map(|g| (ParamId(id), g))
        })
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(1024),
            param_nodes: vec![None; store.len()],
        }
    }

    /// A tape with no parameter store; only inputs and derived values.
    pub fn standalone() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'s, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant. No gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// The tape node for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.store.expect("param() on a standalone graph");
        let v = self.push_cow(Cow::Borrowed(store.value(id)), Op::Param, true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Tensor::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut value, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(self.value(a).cols(), rv.cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let rv = self.value(row).row(0).to_vec();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Stacks a `1×c` row `n` times.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "repeat_rows expects a row vector");
        let data = rv.row(0).repeat(n);
        let value = Tensor::from_vec(n, rv.cols(), data).expect("repeat shape");
        let rg = self.rg(row);
        self.push(value, Op::RepeatRows(row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t: Vec<f64> = x.data().iter().map(|&x| (GELU_C * (x + GELU_A * x * x * x)).tanh()).collect();
        let data = x.data().iter().zip(&t).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a, t), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with a learned gain and bias (`1×c` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Columns `[start, start+width)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(av.rows(), width);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Rows `[start, start+count)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let av = self.value(a);
        assert!(start + count <= av.rows(), "slice_rows out of range");
        let value = av.slice_rows(start, count);
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|p| self.value(*p).rows() == rows), "concat_cols row mismatch");
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                value.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::concat_rows(&refs).expect("concat_rows column mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Column-wise sum over rows, `S×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, v) in value.row_mut(0).iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows() as f64;
        let av = self.value(a);
        let mut value = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, v) in value.row_mut(0).iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        value.scale_assign(1.0 / n);
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Column-wise maximum over rows; ties resolve to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut value = Tensor::from_vec(1, cols, av.row(0).to_vec()).expect("row");
        let mut arg = vec![0usize; cols];
        for r in 1..av.rows() {
            for (c, v) in av.row(r).iter().enumerate() {
                if *v > value[(0, c)] {
                    value[(0, c)] = *v;
                    arg[c] = r;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::MaxRows(a, arg), rg)
    }

    /// Sum of all entries, as `1×1`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Cosine similarity of two row vectors, as `1×1`. A zero-norm operand
    /// yields 0 with zero gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).row(0), self.value(b).row(0));
        let (na, nb) = (norm(av), norm(bv));
        let c = if na == 0.0 || nb == 0.0 {
            log::warn!("cosine similarity with a zero-norm vector; treating as 0");
            0.0
        } else {
            dot(av, bv) / (na * nb)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(c), Op::Cosine(a, b), rg)
    }

    /// `-ln softmax(logits)[target]`, with the probability clamped from
    /// below at `clamp`. At the clamp the gradient is zero.
    pub fn nll(&mut self, logits: Var, target: usize, clamp: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), 1, "nll expects a logit row");
        assert!(target < lv.cols(), "nll target out of range");
        let mut probs = lv.clone();
        softmax_in_place(probs.row_mut(0));
        let p = probs[(0, target)];
        let clamped = p < clamp;
        let loss = -p.max(clamp).ln();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logits,
                target,
                probs,
                clamped,
            },
            rg,
        )
    }

    /// Reverse sweep seeded with `(node, upstream gradient)` pairs.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }

    fn backward_node(&self, node: &Node<'s>, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    gemm_into(grads, *a, val(*a).shape(), dy, false, val(*b), true);
                }
                if self.rg(*b) {
                    gemm_into(grads, *b, val(*b).shape(), val(*a), true, dy, false);
                }
            }
            Op::MatMulBt(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                if self.rg(*a) {
                    gemm_into(grads, *a, val(*a).shape(), dy, false, val(*b), false);
                }
                if self.rg(*b) {
                    gemm_into(grads, *b, val(*b).shape(), dy, true, val(*a), false);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, || dy.clone());
                self.acc(grads, *b, || dy.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, || dy.clone());
                self.acc(grads, *row, || column_sums(dy));
            }
            Op::RepeatRows(row) => {
                self.acc(grads, *row, || column_sums(dy));
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, || dy.map(|g| g * s));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || dy.zip_map(val(*b), |g, y| g * y));
                self.acc(grads, *b, || dy.zip_map(val(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                self.acc(grads, *a, || dy.zip_map(bv, |g, y| g / y));
                self.acc(grads, *b, || {
                    let num = dy.zip_map(val(*a), |g, x| g * x);
                    num.zip_map(bv, |n, y| -n / (y * y))
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, || dy.zip_map(&node.value, |g, y| g * y));
            }
            Op::Ln(a) => {
                self.acc(grads, *a, || dy.zip_map(val(*a), |g, x| g / x));
            }
            Op::Gelu(a, tanh) => {
                self.acc(grads, *a, || {
                    let x = val(*a);
                    let data = dy
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(tanh)
                        .map(|((&g, &x), &t)| {
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
                });
            }
            Op::Relu(a) => {
                self.acc(grads, *a, || dy.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                self.acc(grads, *a, || {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let inner = dot(yr, gr);
                        for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    dx
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = val(*gain).row(0);
                self.acc(grads, *gain, || column_sums(&dy.zip_map(xhat, |d, h| d * h)));
                self.acc(grads, *bias, || column_sums(dy));
                self.acc(grads, *x, || {
                    let (rows, cols) = xhat.shape();
                    let n = cols as f64;
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        for ((d, gy), gv) in dxhat.iter_mut().zip(dy.row(r)).zip(g) {
                            *d = gy * gv;
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh = dot(&dxhat, xhat.row(r));
                        let inv = inv_std[r];
                        for ((o, d), h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = inv / n * (n * d - sum_d - h * sum_dh);
                        }
                    }
                    dx
                });
            }
            Op::SliceCols(a, start) => {
                self.acc(grads, *a, || {
                    let (rows, cols) = val(*a).shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    let w = dy.cols();
                    for r in 0..rows {
                        dx.row_mut(r)[*start..start + w].copy_from_slice(dy.row(r));
                    }
                    dx
                });
            }
            Op::SliceRows(a, start) => {
                self.acc(grads, *a, || {
                    let (rows, cols) = val(*a).shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..dy.rows() {
                        dx.row_mut(start + r).copy_from_slice(dy.row(r));
                    }
                    dx
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, w) = val(*p).shape();
                    self.acc(grads, *p, || {
                        let mut dx = Tensor::zeros(rows, w);
                        for r in 0..rows {
                            dx.row_mut(r).copy_from_slice(&dy.row(r)[off..off + w]);
                        }
                        dx
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    self.acc(grads, *p, || dy.slice_rows(off, rows));
                    off += rows;
                }
            }
            Op::SumRows(a) => {
                self.acc(grads, *a, || broadcast_rows(dy, val(*a).rows(), 1.0));
            }
            Op::MeanRows(a) => {
                let n = val(*a).rows();
                self.acc(grads, *a, || broadcast_rows(dy, n, 1.0 / n as f64));
            }
            Op::MaxRows(a, arg) => {
                self.acc(grads, *a, || {
                    let (rows, cols) = val(*a).shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for (c, r) in arg.iter().enumerate() {
                        dx[(*r, c)] = dy[(0, c)];
                    }
                    dx
                });
            }
            Op::SumAll(a) => {
                let (rows, cols) = val(*a).shape();
                self.acc(grads, *a, || Tensor::filled(rows, cols, dy.item()));
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a).row(0), val(*b).row(0));
                let (na, nb) = (norm(av), norm(bv));
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let c = node.value.item();
                let g = dy.item();
                let grad_of = |x: &[f64], y: &[f64], nx: f64, ny: f64| {
                    let data = x
                        .iter()
                        .zip(y)
                        .map(|(xv, yv)| g * (yv / (nx * ny) - c * xv / (nx * nx)))
                        .collect();
                    Tensor::from_vec(1, x.len(), data).expect("row")
                };
                self.acc(grads, *a, || grad_of(av, bv, na, nb));
                self.acc(grads, *b, || grad_of(bv, av, nb, na));
            }
            Op::Nll {
                logits,
                target,
                probs,
                clamped,
            } => {
                if *clamped {
                    return;
                }
                let g = dy.item();
                self.acc(grads, *logits, || {
                    let mut d = probs.map(|p| g * p);
                    d[(0, *target)] -= g;
                    d
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if self.rg(v) {
            accumulate(grads, v, make());
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn gemm_into(
    grads: &mut [Option<Tensor>],
    target: Var,
    shape: (usize, usize),
    a: &Tensor,
    ta: bool,
    b: &Tensor,
    tb: bool,
) {
    match &mut grads[target.0] {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        slot @ None => {
            let mut out = Tensor::zeros(shape.0, shape.1);
            gemm(a, ta, b, tb, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

fn broadcast_rows(row: &Tensor, n: usize, s: f64) -> Tensor {
    let data: Vec<f64> = row.row(0).iter().map(|v| v * s).collect();
    Tensor::from_vec(n, row.cols(), data.repeat(n)).expect("broadcast shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
