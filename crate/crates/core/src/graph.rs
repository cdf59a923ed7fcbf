//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Gradients are only materialized for nodes that have
//! a trainable ancestor; constants and frozen parameters never get a buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Clamp applied to probabilities inside [`Graph::bce`].
pub const BCE_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        positions: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("graph ops preserve shape invariants")
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: vec![a.rows(), a.cols()],
        right: vec![b.rows(), b.cols()],
    }
}

impl core::fmt::Debug for Graph {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Adds an input tensor. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        let (r, c) = dims(&value);
        let value = if value.shape().len() == 2 {
            value
        } else {
            mat(r, c, value.into_data())
        };
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if materialized.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((n, m), (m2, p)) = (dims(av), dims(bv));
        if m != m2 {
            return Err(mismatch("matmul", av, bv));
        }
        let out = tensor::matmul(av.data(), bv.data(), n, m, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(mat(n, p, out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((n, m), (p, m2)) = (dims(av), dims(bv));
        if m != m2 {
            return Err(mismatch("matmul_bt", av, bv));
        }
        let mut out = vec![0.0; n * p];
        tensor::matmul_bt_acc(av.data(), bv.data(), &mut out, n, m, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(mat(n, p, out), Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if dims(av) != dims(bv) {
            return Err(mismatch("add", av, bv));
        }
        let (r, c) = dims(av);
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(mat(r, c, out), Op::Add(a, b), rg))
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(row));
        let (r, c) = dims(xv);
        if dims(bv) != (1, c) {
            return Err(mismatch("add_row", xv, bv));
        }
        let b = bv.data();
        let out = xv
            .data()
            .chunks_exact(c)
            .flat_map(|xr| xr.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(mat(r, c, out), Op::AddRow(x, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if dims(av) != dims(bv) {
            return Err(mismatch("mul", av, bv));
        }
        let (r, c) = dims(av);
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(mat(r, c, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = dims(xv);
        let out = xv.data().iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(mat(r, c, out), Op::Scale(x, s), rg)
    }

    /// Row-wise layer normalization with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims(xv);
        for p in [gain, bias] {
            if dims(self.value(p)) != (1, c) {
                return Err(mismatch("layer_norm", xv, self.value(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            mat(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only covers columns `0..=i`; the rest
    /// are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != xv.cols() {
            return Err(mismatch("causal_softmax", xv, xv));
        }
        Ok(self.softmax_impl(x, true))
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (r, c) = dims(xv);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { i + 1 } else { c };
            let row = &xv.row(i)[..width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..i * c + width];
            let mut z = 0.0;
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = libm::exp(v - max);
                z += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= z;
            }
        }
        let rg = self.rg(x);
        self.push(mat(r, c, out), Op::Softmax(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = dims(xv);
        let out = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::tanh(GELU_C * (v + GELU_A * v * v * v))))
            .collect();
        let rg = self.rg(x);
        self.push(mat(r, c, out), Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = dims(xv);
        let out = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(mat(r, c, out), Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = dims(xv);
        let out = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(mat(r, c, out), Op::Sigmoid(x), rg)
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let (r, c) = dims(xv);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        self.push(mat(r, c, out), Op::Dropout { x, mask }, rg)
    }

    /// Gathers rows of `x` (embedding lookup when `x` is a table).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims(xv);
        if idx.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "select_rows",
                left: vec![r, c],
                right: vec![0],
            });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::TokenOutOfRange { id: i, vocab: r });
            }
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            mat(idx.len(), c, out),
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `base` where row `positions[i]` is replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, positions: &[usize]) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        let ((r, c), (sr, sc)) = (dims(bv), dims(sv));
        if sc != c || sr != positions.len() {
            return Err(mismatch("scatter_rows", bv, sv));
        }
        let mut seen = vec![false; r];
        for &p in positions {
            if p >= r || seen[p] {
                return Err(Error::ShapeMismatch {
                    op: "scatter_rows",
                    left: vec![r, c],
                    right: positions.to_vec(),
                });
            }
            seen[p] = true;
        }
        let mut out = bv.data().to_vec();
        for (i, &p) in positions.iter().enumerate() {
            out[p * c..(p + 1) * c].copy_from_slice(sv.row(i));
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(
            mat(r, c, out),
            Op::ScatterRows {
                base,
                src,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims(xv);
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let out = xv
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(mat(r, len, out), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?;
        let r = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(mat(r, c, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sum of all entries, as a `1 × 1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Summed binary cross-entropy of probabilities `p` against 0/1 labels,
    /// with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(Error::LengthMismatch {
                labels: labels.len(),
                predictions: pv.len(),
            });
        }
        let loss = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &s)| {
                let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(s * libm::log(q) + (1.0 - s) * libm::log(1.0 - q))
            })
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = dims(lv);
        if r != targets.len() {
            return Err(Error::LengthMismatch {
                labels: targets.len(),
                predictions: r,
            });
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let t = targets[i];
            if t >= c {
                return Err(Error::TokenOutOfRange { id: t, vocab: c });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pr = &mut probs[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = libm::exp(v - max);
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            loss += -(row[t] - max - libm::log(z));
        }
        loss /= r as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar. Replaces any gradients from a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let (r, c) = dims(&node.value);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((n, m), (_, p)) = (dims(val(*a)), dims(val(*b)));
                if wants(*a) {
                    let ga = acc(grads, *a, n * m);
                    tensor::matmul_bt_acc(g, val(*b).data(), ga, n, p, m);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, m * p);
                    tensor::matmul_at_acc(val(*a).data(), g, gb, n, m, p);
                }
            }
            Op::MatMulBt(a, b) => {
                let ((n, m), (p, _)) = (dims(val(*a)), dims(val(*b)));
                if wants(*a) {
                    let ga = acc(grads, *a, n * m);
                    tensor::matmul_acc(g, val(*b).data(), ga, n, p, m);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, p * m);
                    tensor::matmul_at_acc(g, val(*a).data(), gb, n, p, m);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        tensor::axpy(1.0, g, acc(grads, v, g.len()));
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    tensor::axpy(1.0, g, acc(grads, *x, g.len()));
                }
                if wants(*row) {
                    let gb = acc(grads, *row, c);
                    for gr in g.chunks_exact(c) {
                        tensor::axpy(1.0, gr, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    for ((o, gv), bv) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gv * bv;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    for ((o, gv), av) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                tensor::axpy(*s, g, acc(grads, *x, g.len()));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                if wants(*x) {
                    let gx = acc(grads, *x, r * c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let out = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            out[j] += inv_std[i] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = acc(grads, *gain, c);
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = acc(grads, *bias, c);
                    for gr in g.chunks_exact(c) {
                        tensor::axpy(1.0, gr, gb);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let gx = acc(grads, *x, r * c);
                for i in 0..r {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let s = tensor::dot(yr, gr);
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                for ((o, gv), &v) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    let t = libm::tanh(GELU_C * (v + GELU_A * v * v * v));
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o += gv * d;
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                for ((o, gv), &v) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                for ((o, gv), &yv) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                    *o += gv * yv * (1.0 - yv);
                }
            }
            Op::Dropout { x, mask } => {
                for ((o, gv), m) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::SelectRows { x, idx } => {
                let n = val(*x).len();
                let gx = acc(grads, *x, n);
                for (i, &row) in idx.iter().enumerate() {
                    tensor::axpy(1.0, &g[i * c..(i + 1) * c], &mut gx[row * c..(row + 1) * c]);
                }
            }
            Op::ScatterRows {
                base,
                src,
                positions,
            } => {
                if wants(*base) {
                    let gb = acc(grads, *base, r * c);
                    tensor::axpy(1.0, g, gb);
                    for &p in positions {
                        for j in 0..c {
                            gb[p * c + j] -= g[p * c + j];
                        }
                    }
                }
                if wants(*src) {
                    let gs = acc(grads, *src, positions.len() * c);
                    for (i, &p) in positions.iter().enumerate() {
                        tensor::axpy(1.0, &g[p * c..(p + 1) * c], &mut gs[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xc = val(*x).cols();
                let gx = acc(grads, *x, r * xc);
                for i in 0..r {
                    tensor::axpy(
                        1.0,
                        &g[i * c..(i + 1) * c],
                        &mut gx[i * xc + start..i * xc + start + c],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if wants(p) {
                        let gp = acc(grads, p, r * pc);
                        for i in 0..r {
                            tensor::axpy(
                                1.0,
                                &g[i * c + offset..i * c + offset + pc],
                                &mut gp[i * pc..(i + 1) * pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                for o in acc(grads, *x, n).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Bce { p, labels } => {
                let pv = val(*p).data();
                for ((o, &q), &s) in acc(grads, *p, labels.len()).iter_mut().zip(pv).zip(labels) {
                    if q > BCE_EPS && q < 1.0 - BCE_EPS {
                        *o += g[0] * (-s / q + (1.0 - s) / (1.0 - q));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (lr, lc) = dims(val(*logits));
                let scale = g[0] / lr as f64;
                let gl = acc(grads, *logits, lr * lc);
                for (i, &t) in targets.iter().enumerate() {
                    let pr = &probs[i * lc..(i + 1) * lc];
                    let out = &mut gl[i * lc..(i + 1) * lc];
                    tensor::axpy(scale, pr, out);
                    out[t] -= scale;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use proptest::prelude::{prop, prop_assert, proptest, Just, Strategy};

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    /// Central finite differences of `f` w.r.t. every entry of `inputs[which]`.
    fn numeric_grad(
        f: &dyn Fn(&mut Graph, &[Var]) -> Var,
        inputs: &[Tensor],
        which: usize,
    ) -> Vec<f64> {
        let h = 1e-5;
        let eval = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = f(&mut g, &vars);
            g.value(out).data()[0]
        };
        (0..inputs[which].len())
            .map(|k| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[k] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[k] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn check(f: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.backward(out).unwrap();
        for (w, &v) in vars.iter().enumerate() {
            let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[w].len()]);
            let numeric = numeric_grad(f, inputs, w);
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < 1e-4 || (a - n).abs() < 1e-8, "input {w}: analytic {a} vs numeric {n}");
            }
        }
    }

    /// Projects any output to a scalar with fixed random weights so every
    /// output entry contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, x: Var) -> Var {
        let v = g.value(x);
        let (r, c) = (v.rows(), v.cols());
        let w: Vec<f64> = (0..r * c).map(|i| libm::sin(i as f64 * 1.7 + 0.3)).collect();
        let wv = g.constant(t(r, c, &w));
        let m = g.mul(x, wv).unwrap();
        g.sum(m)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_of_one_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[1.0, 0.0]));
        let y = g.softmax(x);
        let e = core::f64::consts::E;
        assert!((g.value(y).data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.value(y).data()[0] - 0.7311).abs() < 1e-4);
        assert!((g.value(y).data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(1, 3, &[1.0, -2.0, 5.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_detached_and_non_scalar() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        let y = g.scale(c, 2.0);
        assert_eq!(g.backward(y), Err(Error::Detached));
        let x = g.leaf(Tensor::zeros(&[1, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient_buffer() {
        let mut g = Graph::new();
        let w = g.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let c = g.constant(t(2, 1, &[1.0, -1.0]));
        let y = g.matmul(w, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, 5, 16));
        let gain = g.constant(t(1, 16, &[1.0; 16]));
        let bias = g.constant(Tensor::zeros(&[1, 16]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let yv = g.value(y);
        for i in 0..5 {
            let row = yv.row(i);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, 4, 4));
        let y = g.causal_softmax(x).unwrap();
        let yv = g.value(y);
        for i in 0..4 {
            assert!((yv.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in i + 1..4 {
                assert_eq!(yv.row(i)[j], 0.0);
            }
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let x = Tensor::new(vec![4, 8], (0..32).map(|v| v as f64).collect()).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = g.dropout(v, 0.1, &mut rng);
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..100 {
            let a = random(&mut rng, 3, 4);
            let b = random(&mut rng, 4, 2);
            let sq = random(&mut rng, 3, 3);
            let bt = random(&mut rng, 5, 4);
            let row = random(&mut rng, 1, 4);
            let src = random(&mut rng, 2, 4);
            let probs = Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
            match case % 10 {
                0 => check(&|g, v| { let y = g.matmul(v[0], v[1]).unwrap(); weighted_sum(g, y) }, &[a, b]),
                1 => check(&|g, v| { let y = g.matmul_bt(v[0], v[1]).unwrap(); weighted_sum(g, y) }, &[a, bt]),
                2 => check(&|g, v| { let y = g.add_row(v[0], v[1]).unwrap(); let y = g.gelu(y); weighted_sum(g, y) }, &[a, row]),
                3 => check(
                    &|g, v| {
                        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
                        weighted_sum(g, y)
                    },
                    &[a, row.clone(), random(&mut rng, 1, 4)],
                ),
                4 => check(&|g, v| { let y = g.softmax(v[0]); weighted_sum(g, y) }, &[sq]),
                5 => check(&|g, v| { let y = g.causal_softmax(v[0]).unwrap(); weighted_sum(g, y) }, &[sq]),
                6 => check(
                    &|g, v| {
                        let s = g.sigmoid(v[0]);
                        let m = g.mul(s, v[1]).unwrap();
                        let r = g.relu(m);
                        weighted_sum(g, r)
                    },
                    &[a.clone(), random(&mut rng, 3, 4)],
                ),
                7 => check(
                    &|g, v| {
                        let y = g.scatter_rows(v[0], v[1], &[2, 0]).unwrap();
                        let s = g.select_rows(y, &[0, 0, 1, 2]).unwrap();
                        weighted_sum(g, s)
                    },
                    &[a, src],
                ),
                8 => check(
                    &|g, v| {
                        let l = g.slice_cols(v[0], 1, 2).unwrap();
                        let r = g.slice_cols(v[0], 0, 1).unwrap();
                        let c = g.concat_cols(&[r, l, r]).unwrap();
                        let c = g.scale(c, 0.7);
                        let ce = g.cross_entropy(c, &[1, 0, 2]).unwrap();
                        let w = weighted_sum(g, c);
                        g.add(ce, w).unwrap()
                    },
                    &[a],
                ),
                _ => check(&|g, v| g.bce(v[0], &[1.0, 0.0, 0.0, 1.0]).unwrap(), &[probs]),
            }
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 6, 5);
        let w1 = random(&mut rng, 5, 8);
        let b1 = random(&mut rng, 1, 8);
        let w2 = random(&mut rng, 8, 3);
        let f = |g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_row(h, v[2]).unwrap();
            let h = g.relu(h);
            let o = g.matmul(h, v[3]).unwrap();
            g.cross_entropy(o, &[0, 1, 2, 0, 1, 2]).unwrap()
        };
        check(&f, &[x, w1, b1, w2]);
    }

    fn rows_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..5, 2usize..9).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-30.0f64..30.0, r * c)))
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions((r, c, data) in rows_strategy()) {
            let mut g = Graph::new();
            let x = g.constant(t(r, c, &data));
            let y = g.softmax(x);
            for i in 0..r {
                let row = g.value(y).row(i);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn layer_norm_centers_and_scales((r, c, data) in rows_strategy()) {
            let mut g = Graph::new();
            let x = g.constant(t(r, c, &data));
            let gain = g.constant(t(1, c, &vec![1.0; c]));
            let bias = g.constant(t(1, c, &vec![0.0; c]));
            let y = g.layer_norm(x, gain, bias).unwrap();
            for i in 0..r {
                let src = &data[i * c..(i + 1) * c];
                let m = src.iter().sum::<f64>() / c as f64;
                let var = src.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
                let row = g.value(y).row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let out_var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((out_var - var / (var + LAYER_NORM_EPS)).abs() < 1e-6);
            }
        }
    }
}
