//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A forward pass records one node per operation; `backward` walks the tape
//! in reverse and accumulates exact gradients for every leaf created with
//! `param` or `leaf_grad`. Reductions that feed log-sum-exp terms accumulate
//! their exponentials in ascending value order, which makes the recorded
//! loss bit-invariant under permutations of equivalent inputs.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    LayerNormRows(usize, f64),
    SoftmaxRows(usize),
    NormalizeRows(usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    LogSumExpAll(usize),
    LogSumExpRows(usize),
    SumAll(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for leaf variables after one backward pass.
#[derive(Debug)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (parameters, or inputs under gradient checks).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).cols(),
            self.value(b).rows(),
            "matmul inner dims"
        );
        let v = gemm(self.value(a), false, self.value(b), false);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a.0, b.0), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.get2(i, j);
            }
        }
        let v = Tensor::matrix(n, m, out).unwrap();
        let g = self.ng(a);
        self.push(v, Op::Transpose(a.0), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a.0, b.0), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a.0, b.0), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a.0, b.0), g)
    }

    /// Broadcast-add a single row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "add_row broadcast operand must be one row");
        assert_eq!(x.cols(), r.cols(), "add_row widths");
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a.0, row.0), g)
    }

    /// Broadcast-multiply every row of `a` by a single row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "mul_row broadcast operand must be one row");
        assert_eq!(x.cols(), r.cols(), "mul_row widths");
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a.0, row.0), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let g = self.ng(a);
        self.push(v, Op::Scale(a.0, c), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let g = self.ng(a);
        self.push(v, Op::Relu(a.0), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let g = self.ng(a);
        self.push(v, Op::Gelu(a.0), g)
    }

    /// Per-row standardization to mean 0, variance 1 (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let (mu, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for o in row.iter_mut() {
                *o = (*o - mu) * inv;
            }
        }
        let g = self.ng(a);
        self.push(v, Op::LayerNormRows(a.0, eps), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for o in row.iter_mut() {
                *o = (*o - max).exp();
                z += *o;
            }
            for o in row.iter_mut() {
                *o /= z;
            }
        }
        let g = self.ng(a);
        self.push(v, Op::SoftmaxRows(a.0), g)
    }

    /// Per-row L2 normalization. Errors on a zero-norm row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = crate::numeric::norm(row);
            if n == 0.0 {
                return Err(Error::Numeric(format!("zero-norm vector at row {i}")));
            }
            for o in row.iter_mut() {
                *o /= n;
            }
        }
        let g = self.ng(a);
        Ok(self.push(v, Op::NormalizeRows(a.0), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let c = x.cols();
        assert!(start + len <= x.rows(), "slice_rows bounds");
        let data = x.data()[start * c..(start + len) * c].to_vec();
        let v = Tensor::matrix(len, c, data).unwrap();
        let g = self.ng(a);
        self.push(v, Op::SliceRows(a.0, start, len), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols bounds");
        let mut data = Vec::with_capacity(x.rows() * len);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Tensor::matrix(x.rows(), len, data).unwrap();
        let g = self.ng(a);
        self.push(v, Op::SliceCols(a.0, start, len), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows widths");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows, c, data).unwrap();
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols heights");
                data.extend_from_slice(t.row(i));
            }
        }
        let v = Tensor::matrix(rows, total, data).unwrap();
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), g)
    }

    /// log(sum(exp(x))) over all entries, with max subtraction and sorted
    /// accumulation. Returns a 1x1 tensor.
    pub fn log_sum_exp_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(crate::numeric::log_sum_exp(self.value(a).data()));
        let g = self.ng(a);
        self.push(v, Op::LogSumExpAll(a.0), g)
    }

    /// Row-wise log-sum-exp; returns an [m,1] tensor.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data: Vec<f64> = (0..x.rows())
            .map(|i| crate::numeric::log_sum_exp(x.row(i)))
            .collect();
        let v = Tensor::matrix(x.rows(), 1, data).unwrap();
        let g = self.ng(a);
        self.push(v, Op::LogSumExpRows(a.0), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let g = self.ng(a);
        self.push(v, Op::SumAll(a.0), g)
    }

    /// Reverse pass from a scalar loss. Gradients are returned for leaves
    /// created with `param` / `leaf_grad`; interior nodes are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Numeric(
                "backward called twice without re-running forward".into(),
            ));
        }
        self.spent = true;
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(
            Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]).expect("scalar grad seed"),
        );

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep leaf gradients for the caller
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].needs_grad {
                        let da = gemm(&g, false, &self.nodes[b].value, true);
                        acc(&mut grads, a, da);
                    }
                    if self.nodes[b].needs_grad {
                        let db = gemm(&self.nodes[a].value, true, &g, false);
                        acc(&mut grads, b, db);
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (m, n) = (g.rows(), g.cols());
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            out[c * m + r] = g.get2(r, c);
                        }
                    }
                    acc(&mut grads, a, Tensor::matrix(n, m, out).unwrap());
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].needs_grad {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.nodes[b].needs_grad {
                        acc(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].needs_grad {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.nodes[b].needs_grad {
                        let neg =
                            Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| -x).collect())
                                .unwrap();
                        acc(&mut grads, b, neg);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].needs_grad {
                        let da = elementwise(&g, &self.nodes[b].value, |x, y| x * y);
                        acc(&mut grads, a, da);
                    }
                    if self.nodes[b].needs_grad {
                        let db = elementwise(&g, &self.nodes[a].value, |x, y| x * y);
                        acc(&mut grads, b, db);
                    }
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    if self.nodes[a].needs_grad {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.nodes[row].needs_grad {
                        acc(&mut grads, row, colsum(&g));
                    }
                }
                Op::MulRow(a, row) => {
                    let (a, row) = (*a, *row);
                    if self.nodes[a].needs_grad {
                        let rv = &self.nodes[row].value;
                        let mut da = g.clone();
                        for r in 0..da.rows() {
                            for (o, s) in da.row_mut(r).iter_mut().zip(rv.data()) {
                                *o *= s;
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                    if self.nodes[row].needs_grad {
                        let prod = elementwise(&g, &self.nodes[a].value, |x, y| x * y);
                        acc(&mut grads, row, colsum(&prod));
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let da =
                        Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| x * c).collect())
                            .unwrap();
                    acc(&mut grads, a, da);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da = elementwise(&g, &self.nodes[a].value, |gy, x| {
                        if x > 0.0 {
                            gy
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, a, da);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let da = elementwise(&g, &self.nodes[a].value, |gy, x| gy * gelu_grad(x));
                    acc(&mut grads, a, da);
                }
                Op::LayerNormRows(a, eps) => {
                    let (a, eps) = (*a, *eps);
                    let x = &self.nodes[a].value;
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let n = x.cols() as f64;
                    for r in 0..x.rows() {
                        let (_, var) = mean_var(x.row(r));
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let m1: f64 = gr.iter().sum::<f64>() / n;
                        let m2: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        let out = dx.row_mut(r);
                        for j in 0..out.len() {
                            out[j] = inv * (gr[j] - m1 - yr[j] * m2);
                        }
                    }
                    acc(&mut grads, a, dx);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let p = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(p.shape().to_vec());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        let out = dx.row_mut(r);
                        for j in 0..out.len() {
                            out[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, a, dx);
                }
                Op::NormalizeRows(a) => {
                    let a = *a;
                    let x = &self.nodes[a].value;
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    for r in 0..x.rows() {
                        let n = crate::numeric::norm(x.row(r));
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let out = dx.row_mut(r);
                        for j in 0..out.len() {
                            out[j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                    acc(&mut grads, a, dx);
                }
                Op::SliceRows(a, start, len) => {
                    let (a, start, _len) = (*a, *start, *len);
                    let x = &self.nodes[a].value;
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let c = x.cols();
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, a, dx);
                }
                Op::SliceCols(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let x = &self.nodes[a].value;
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    for r in 0..x.rows() {
                        let gr = g.row(r);
                        dx.row_mut(r)[start..start + len].copy_from_slice(gr);
                    }
                    acc(&mut grads, a, dx);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut row = 0;
                    for p in parts {
                        let rows_p = self.nodes[p].value.rows();
                        if self.nodes[p].needs_grad {
                            let c = g.cols();
                            let slice =
                                g.data()[row * c..(row + rows_p) * c].to_vec();
                            acc(&mut grads, p, Tensor::matrix(rows_p, c, slice).unwrap());
                        }
                        row += rows_p;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut col = 0;
                    for p in parts {
                        let cols_p = self.nodes[p].value.cols();
                        if self.nodes[p].needs_grad {
                            let rows = g.rows();
                            let mut dp = Tensor::zeros(vec![rows, cols_p]);
                            for r in 0..rows {
                                dp.row_mut(r)
                                    .copy_from_slice(&g.row(r)[col..col + cols_p]);
                            }
                            acc(&mut grads, p, dp);
                        }
                        col += cols_p;
                    }
                }
                Op::LogSumExpAll(a) => {
                    let a = *a;
                    let lse = self.nodes[i].value.item();
                    let gs = g.item();
                    let x = &self.nodes[a].value;
                    let da = Tensor::new(
                        x.shape().to_vec(),
                        x.data().iter().map(|&v| gs * (v - lse).exp()).collect(),
                    )
                    .unwrap();
                    acc(&mut grads, a, da);
                }
                Op::LogSumExpRows(a) => {
                    let a = *a;
                    let x = &self.nodes[a].value;
                    let lse = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    for r in 0..x.rows() {
                        let gs = g.data()[r];
                        let l = lse.data()[r];
                        let xr = x.row(r);
                        let out = dx.row_mut(r);
                        for j in 0..out.len() {
                            out[j] = gs * (xr[j] - l).exp();
                        }
                    }
                    acc(&mut grads, a, dx);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gs = g.item();
                    let x = &self.nodes[a].value;
                    let da = Tensor::new(x.shape().to_vec(), vec![gs; x.len()]).unwrap();
                    acc(&mut grads, a, da);
                }
            }
        }

        Ok(Gradients { by_var: grads })
    }
}

fn acc(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn colsum(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::matrix(1, g.cols(), out).unwrap()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

const GELU_C: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}
