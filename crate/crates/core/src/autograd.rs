//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node that depends on a parameter.
//! Graphs are cheap and single-use: build one per sample, differentiate
//! it, harvest the parameter gradients, drop it.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, log_softmax_rows, softmax_rows, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    Square(Var),
    TruncSquare(Var, f64),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    BceWithLogits { logits: Var, targets: Matrix },
    ColMax { input: Var, argmax: Vec<usize> },
    /// Scalar output whose local gradients were computed during the forward pass.
    Precomputed { inputs: Vec<Var>, grads: Vec<Matrix> },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    grads: Vec<Option<Matrix>>,
    stopped: Vec<Matrix>,
    replay: Option<Vec<Matrix>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
            grads: Vec::new(),
            stopped: Vec::new(),
            replay: None,
        }
    }

    /// A graph whose [`Graph::stop_gradient`] calls return `values` in
    /// order instead of their arguments. Finite differences of a
    /// stop-gradient objective hold the stopped values fixed this way.
    pub fn replaying(values: Vec<Matrix>) -> Self {
        Self { replay: Some(values), ..Self::new() }
    }

    /// Every value passed through [`Graph::stop_gradient`] so far.
    pub fn stopped_values(&self) -> &[Matrix] {
        &self.stopped
    }

    /// A graph whose [`Graph::dropout`] calls draw masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self { dropout_rng: Some(rng), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
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

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not tied to a parameter store.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding a copy of parameter `id`. Repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// A constant computed from other graph values, recorded so it can be
    /// replayed. No gradient flows through it.
    pub fn stop_gradient(&mut self, value: Matrix) -> Var {
        let i = self.stopped.len();
        let value = match &self.replay {
            Some(values) => {
                let v = values.get(i).expect("replay covers every stop-gradient value").clone();
                assert_eq!(v.shape(), value.shape(), "replayed stop-gradient value changed shape");
                v
            }
            None => value,
        };
        self.stopped.push(value.clone());
        self.constant(value)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.stop_gradient(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row-major reinterpretation with a new shape of equal size.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = Matrix::from_vec(rows, cols, self.value(a).as_slice().to_vec()).expect("reshape size");
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut value = self.value(a).clone();
        let b = self.value(row);
        assert_eq!(b.shape(), (1, value.cols()), "add_row expects a 1 x n row");
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let mut value = self.value(a).clone();
        let b = self.value(row);
        assert_eq!(b.shape(), (1, value.cols()), "mul_row expects a 1 x n row");
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *x *= y;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(value, Op::Square(a), ng)
    }

    /// `min(|x|, tau)^2` elementwise.
    pub fn trunc_square(&mut self, a: Var, tau: f64) -> Var {
        let value = self.value(a).map(|x| {
            let m = x.abs().min(tau);
            m * m
        });
        let ng = self.needs(a);
        self.push(value, Op::TruncSquare(a, tau), ng)
    }

    /// `max(x, floor)` elementwise.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        let ng = self.needs(a);
        self.push(value, Op::ClampMin(a, floor), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.needs(a);
        self.push(value, Op::LayerNorm { input: a, inv_std }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row counts");
                let w = src.cols();
                value.row_mut(r)[offset..offset + w].copy_from_slice(src.row(r));
                offset += w;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Rows `indices` of `a`, in order; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select_rows(indices);
        let ng = self.needs(a);
        self.push(value, Op::GatherRows(a, indices.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::scalar(x.sum() / x.len() as f64);
        let ng = self.needs(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let ls = log_softmax_rows(self.value(logits));
        assert_eq!(ls.rows(), targets.len(), "cross_entropy target count");
        let total: f64 = targets.iter().enumerate().map(|(r, &t)| -ls.get(r, t)).sum();
        let value = Matrix::scalar(total / targets.len() as f64);
        let ng = self.needs(logits);
        self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec() }, ng)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce target shape");
        let total: f64 = x
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Matrix::scalar(total / x.len() as f64);
        let ng = self.needs(logits);
        self.push(value, Op::BceWithLogits { logits, targets }, ng)
    }

    /// Column-wise maximum as a `1 × cols` row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut argmax = vec![0usize; x.cols()];
        let mut value = Matrix::zeros(1, x.cols());
        for c in 0..x.cols() {
            let mut best = 0;
            for r in 1..x.rows() {
                if x.get(r, c) > x.get(best, c) {
                    best = r;
                }
            }
            argmax[c] = best;
            value.set(0, c, x.get(best, c));
        }
        let ng = self.needs(a);
        self.push(value, Op::ColMax { input: a, argmax }, ng)
    }

    /// Inverted dropout; identity outside training graphs or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        let (rows, cols) = self.nodes[a.0].value.shape();
        let keep = 1.0 - rate;
        let mask: Vec<f64> =
            (0..rows * cols).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mask = self.constant(Matrix::from_vec(rows, cols, mask).expect("mask shape"));
        self.mul(a, mask)
    }

    /// Records a scalar computed outside the tape together with its gradients
    /// with respect to `inputs`.
    pub fn precomputed(&mut self, value: f64, inputs: &[Var], grads: Vec<Matrix>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (&v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(v).shape(), g.shape(), "precomputed gradient shape");
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(Matrix::scalar(value), Op::Precomputed { inputs: inputs.to_vec(), grads }, ng)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    /// Parameter gradients from the last backward pass. Parameters that were
    /// used but received no gradient map to zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self.grad(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.value(v).shape();
                    Matrix::zeros(r, c)
                });
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, delta: Matrix| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if nodes[a.0].needs_grad {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(false, true, g, bv, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if nodes[b.0].needs_grad {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(true, false, av, g, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = nodes[a.0].value.shape();
                acc(*a, Matrix::from_vec(r, c, g.as_slice().to_vec()).expect("reshape grad"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(&nodes[b.0].value, |x, y| x * y));
                acc(*b, g.zip_map(&nodes[a.0].value, |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let rv = &nodes[row.0].value;
                let av = &nodes[a.0].value;
                let mut ga = g.clone();
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, c, g.get(r, c) * rv.get(0, c));
                        gr.as_mut_slice()[c] += g.get(r, c) * av.get(r, c);
                    }
                }
                acc(*a, ga);
                acc(*row, gr);
            }
            Op::Gelu(a) => acc(*a, g.zip_map(&nodes[a.0].value, |gv, x| gv * gelu_grad(x))),
            Op::Square(a) => acc(*a, g.zip_map(&nodes[a.0].value, |gv, x| 2.0 * x * gv)),
            Op::TruncSquare(a, tau) => acc(
                *a,
                g.zip_map(&nodes[a.0].value, |gv, x| if x.abs() < *tau { 2.0 * x * gv } else { 0.0 }),
            ),
            Op::ClampMin(a, floor) => {
                acc(*a, g.zip_map(&nodes[a.0].value, |gv, x| if x > *floor { gv } else { 0.0 }))
            }
            Op::Softmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (c, dst) in ga.row_mut(r).iter_mut().enumerate() {
                        *dst = y[c] * (gr[c] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for (c, dst) in ga.row_mut(r).iter_mut().enumerate() {
                        *dst = gr[c] - y[c].exp() * total;
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm { input, inv_std } => {
                let n = out.cols() as f64;
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (c, dst) in ga.row_mut(r).iter_mut().enumerate() {
                        *dst = inv_std[r] * (gr[c] - mean_g - y[c] * mean_gy);
                    }
                }
                acc(*input, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = nodes[a.0].value.shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                }
                acc(*a, ga);
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = nodes[a.0].value.shape();
                let mut ga = Matrix::zeros(r, c);
                for (i, &src) in indices.iter().enumerate() {
                    for (dst, v) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *dst += v;
                    }
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = nodes[a.0].value.shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = nodes[a.0].value.shape();
                acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::CrossEntropy { logits, targets } => {
                let mut ga = softmax_rows(&nodes[logits.0].value);
                let scale = g.item() / targets.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let row = ga.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, ga);
            }
            Op::BceWithLogits { logits, targets } => {
                let x = &nodes[logits.0].value;
                let scale = g.item() / x.len() as f64;
                acc(*logits, x.zip_map(targets, |z, t| (sigmoid(z) - t) * scale));
            }
            Op::ColMax { input, argmax } => {
                let (r, c) = nodes[input.0].value.shape();
                let mut ga = Matrix::zeros(r, c);
                for (col, &row) in argmax.iter().enumerate() {
                    ga.set(row, col, g.get(0, col));
                }
                acc(*input, ga);
            }
            Op::Precomputed { inputs, grads: local } => {
                let s = g.item();
                for (v, lg) in inputs.iter().zip(local) {
                    acc(*v, lg.map(|x| x * s));
                }
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (dst, v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *dst += v;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
