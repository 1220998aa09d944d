//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] records a define-by-run tape of tensor ops; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! requires them. Graphs are built per sample and never reused across steps;
//! distinct graphs may run on different threads.
//!
//! All math is double precision. In debug builds every op output is scanned
//! for NaN/Inf so numeric failures surface at the op that produced them.

mod kernels;

pub use kernels::{mm, mm_nt, mm_tn};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Row-major n-dimensional value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid(format!(
                "buffer of {} values cannot fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::invalid(format!("expected a matrix, got shape {other:?}"))),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-column statistics captured by a train-mode batch norm op.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `[m x n] + [n]` row broadcast.
    AddBias(Var, Var),
    Matmul(Var, Var),
    /// `a * b^T` with `b` stored `[n x k]`.
    MatmulNT(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Scale(Var, f64),
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        index: usize,
    },
    Sum(Var),
    /// Scalar with a caller-supplied gradient w.r.t. its input
    /// (used to splice externally computed losses into the tape).
    ExternalScalar {
        x: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Matmul(..) => "matmul",
            Op::MatmulNT(..) => "matmul_nt",
            Op::Conv1d { .. } => "conv1d",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(..) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxRows(..) => "softmax",
            Op::MaskedSoftmaxRows(..) => "masked_softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::Scale(..) => "scale",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Embedding { .. } => "embedding",
            Op::Pick { .. } => "pick",
            Op::Sum(..) => "sum",
            Op::ExternalScalar { .. } => "external_scalar",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run tape. Node ids are topologically ordered by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite output of {} op",
            op.name()
        );
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, req, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::from_vec(&[m, n], data).unwrap();
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(t, req, Op::AddBias(x, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        mm(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        let t = Tensor::from_vec(&[m, n], out).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, req, Op::Matmul(a, b)))
    }

    /// `a * b^T` with `b` stored `[n x k]`; returns `[m x n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        let t = Tensor::from_vec(&[m, n], out).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, req, Op::MatmulNT(a, b)))
    }

    /// 1-D convolution over `x [t x c_in]` with kernel `w [c_out, c_in, k]`
    /// and bias `[c_out]`, producing `[t_out x c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (t_in, c_in) = self.value(x).dims2()?;
        let wshape = self.value(w).shape().to_vec();
        let [c_out, wc_in, kw] = wshape.as_slice() else {
            return Err(Error::invalid(format!(
                "conv kernel must be rank 3, got {wshape:?}"
            )));
        };
        let (c_out, wc_in, kw) = (*c_out, *wc_in, *kw);
        if wc_in != c_in {
            return Err(self.shape_err("conv1d", x, w));
        }
        if self.value(b).numel() != c_out {
            return Err(self.shape_err("conv1d", w, b));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        if t_in < kw {
            return Err(Error::invalid(format!(
                "conv input of {t_in} frames is shorter than kernel {kw}"
            )));
        }
        let t_out = (t_in + 2 * padding - kw) / stride + 1;

        // im2col: one row of length c_in*kw per output frame.
        let xd = self.value(x).data();
        let mut cols = vec![0.0; t_out * c_in * kw];
        for ti in 0..t_out {
            let base = ti * c_in * kw;
            for ki in 0..kw {
                let src = ti * stride + ki;
                if src < padding || src - padding >= t_in {
                    continue;
                }
                let src_row = &xd[(src - padding) * c_in..(src - padding + 1) * c_in];
                for ci in 0..c_in {
                    cols[base + ci * kw + ki] = src_row[ci];
                }
            }
        }
        let mut out = vec![0.0; t_out * c_out];
        mm_nt(&cols, t_out, c_in * kw, self.value(w).data(), c_out, &mut out);
        let bd = self.value(b).data();
        for row in out.chunks_mut(c_out) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let t = Tensor::from_vec(&[t_out, c_out], out).unwrap();
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            t,
            req,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            },
        ))
    }

    fn norm_forward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        per_column: bool,
        make_op: impl FnOnce(Vec<f64>, Vec<f64>) -> Op,
    ) -> Result<(Var, BatchStats)> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gamma).numel() != self.value(beta).numel() {
            return Err(self.shape_err("norm", gamma, beta));
        }
        let expected = if per_column { cols } else { cols };
        if self.value(gamma).numel() != expected {
            return Err(self.shape_err("norm", x, gamma));
        }
        let xd = self.value(x).data();
        let groups = if per_column { cols } else { rows };
        let group_len = if per_column { rows } else { cols };
        let mut mean = vec![0.0; groups];
        let mut var = vec![0.0; groups];
        let at = |r: usize, c: usize| xd[r * cols + c];
        for g in 0..groups {
            let mut m = 0.0;
            for i in 0..group_len {
                m += if per_column { at(i, g) } else { at(g, i) };
            }
            m /= group_len as f64;
            let mut v = 0.0;
            for i in 0..group_len {
                let d = if per_column { at(i, g) } else { at(g, i) } - m;
                v += d * d;
            }
            mean[g] = m;
            var[g] = v / group_len as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let g = if per_column { c } else { r };
                let xh = (at(r, c) - mean[g]) * inv_std[g];
                xhat[r * cols + c] = xh;
                out[r * cols + c] = gd[c] * xh + bd[c];
            }
        }
        let t = Tensor::from_vec(&[rows, cols], out).unwrap();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let var_node = self.push(t, req, make_op(inv_std, xhat));
        Ok((var_node, stats))
    }

    /// Batch norm over the row (time) axis, one statistic per column.
    /// Returns the batch statistics so callers can maintain running stats.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        self.norm_forward(x, gamma, beta, eps, true, |inv_std, xhat| Op::BatchNormTrain {
            x,
            gamma,
            beta,
            inv_std,
            xhat,
        })
    }

    /// Batch norm as a fixed affine map using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if running_mean.len() != cols || running_var.len() != cols {
            return Err(Error::invalid(format!(
                "running stats of {} features do not match {} columns",
                running_mean.len(),
                cols
            )));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let xh = (xd[r * cols + c] - running_mean[c]) * inv_std[c];
                xhat[r * cols + c] = xh;
                out[r * cols + c] = gd[c] * xh + bd[c];
            }
        }
        let t = Tensor::from_vec(&[rows, cols], out).unwrap();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            t,
            req,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
        ))
    }

    /// Layer norm over each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (var_node, _) = self.norm_forward(x, gamma, beta, eps, false, |inv_std, xhat| Op::LayerNorm {
            x,
            gamma,
            beta,
            inv_std,
            xhat,
        })?;
        Ok(var_node)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_vec(self.value(x).shape(), data).unwrap();
        let req = self.requires(x);
        self.push(t, req, Op::Relu(x))
    }

    /// Inverted dropout: kept entries scale by `1/(1-p)`. Identity when
    /// `p == 0`. Eval-mode callers simply skip the op.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if p == 0.0 || rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::from_vec(self.value(x).shape(), data).unwrap();
        let req = self.requires(x);
        Ok(self.push(t, req, Op::Dropout { x, mask }))
    }

    fn softmax_rows_data(&self, x: Var, log: bool) -> Tensor {
        let (rows, cols) = self.value(x).dims2().expect("softmax input must be 2-D");
        let xd = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            if log {
                let log_denom = denom.ln();
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = v - max - log_denom;
                }
            } else {
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = (v - max).exp() / denom;
                }
            }
        }
        Tensor::from_vec(&[rows, cols], out).unwrap()
    }

    /// Softmax along each row. Rows may contain `-inf` entries (masking);
    /// those positions get probability zero.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims2()?;
        let t = self.softmax_rows_data(x, false);
        let req = self.requires(x);
        Ok(self.push(t, req, Op::SoftmaxRows(x)))
    }

    /// Softmax along each row restricted to `allowed` positions; disallowed
    /// positions get probability zero (the masked logits act as -inf
    /// pre-softmax, without materializing non-finite values on the tape).
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if allowed.len() != rows * cols {
            return Err(Error::invalid(format!(
                "mask of {} entries does not cover a {rows}x{cols} matrix",
                allowed.len()
            )));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mask = &allowed[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("row {r} has no allowed positions")));
            }
            let mut denom = 0.0;
            for (v, m) in row.iter().zip(mask) {
                if *m {
                    denom += (v - max).exp();
                }
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            for ((o, v), m) in orow.iter_mut().zip(row).zip(mask) {
                *o = if *m { (v - max).exp() / denom } else { 0.0 };
            }
        }
        let t = Tensor::from_vec(&[rows, cols], out).unwrap();
        let req = self.requires(x);
        Ok(self.push(t, req, Op::MaskedSoftmaxRows(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims2()?;
        let t = self.softmax_rows_data(x, true);
        let req = self.requires(x);
        Ok(self.push(t, req, Op::LogSoftmaxRows(x)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::from_vec(self.value(x).shape(), data).unwrap();
        let req = self.requires(x);
        self.push(t, req, Op::Scale(x, s))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(self.shape_err("concat_rows", a, b));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::from_vec(&[ra + rb, ca], data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, req, Op::ConcatRows(a, b)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > rows {
            return Err(Error::invalid(format!(
                "row slice {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::from_vec(&[len, cols], data).unwrap();
        let req = self.requires(x);
        Ok(self.push(t, req, Op::SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(Error::invalid(format!(
                "column slice {start}..{} out of {cols} columns",
                start + len
            )));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::from_vec(&[rows, len], data).unwrap();
        let req = self.requires(x);
        Ok(self.push(t, req, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols needs at least one input"));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.value(p).data();
                data.extend_from_slice(&pd[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::from_vec(&[rows, total], data).unwrap();
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(t, req, Op::ConcatCols(parts.to_vec())))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        for &id in ids {
            if id >= rows {
                return Err(Error::invalid(format!(
                    "embedding id {id} out of {rows} rows"
                )));
            }
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(&td[id * cols..(id + 1) * cols]);
        }
        let t = Tensor::from_vec(&[ids.len(), cols], data).unwrap();
        let req = self.requires(table);
        Ok(self.push(
            t,
            req,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Scalar element at a flat index.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        if index >= self.value(x).numel() {
            return Err(Error::invalid(format!(
                "pick index {index} out of {} elements",
                self.value(x).numel()
            )));
        }
        let v = self.value(x).data()[index];
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(v), req, Op::Pick { x, index }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(v), req, Op::Sum(x))
    }

    /// Splices an externally computed scalar loss into the tape, together
    /// with its gradient with respect to `x`.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::invalid(format!(
                "external gradient has {} entries for {} inputs",
                grad.len(),
                self.value(x).numel()
            )));
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(value), req, Op::ExternalScalar { x, grad }))
    }

    /// Convenience: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Populates gradients of every `requires_grad` node reachable from
    /// `loss`, which must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            let gout = node.grad.as_ref().unwrap();
            backward_op(node, gout, before);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], v: Var, contribution: Vec<f64>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        None => node.grad = Some(contribution),
    }
}

#[allow(clippy::too_many_lines)]
fn backward_op(node: &Node, gout: &[f64], before: &mut [Node]) {
    let val = |v: Var, nodes: &[Node]| -> Vec<f64> { nodes[v.0].value.data().to_vec() };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(before, *a, gout.to_vec());
            accumulate(before, *b, gout.to_vec());
        }
        Op::AddBias(x, bias) => {
            accumulate(before, *x, gout.to_vec());
            let n = before[bias.0].value.numel();
            let mut gb = vec![0.0; n];
            for row in gout.chunks(n) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            accumulate(before, *bias, gb);
        }
        Op::Matmul(a, b) => {
            let (m, k) = before[a.0].value.dims2().unwrap();
            let (_, n) = before[b.0].value.dims2().unwrap();
            if before[a.0].requires_grad {
                let mut ga = vec![0.0; m * k];
                mm_nt(gout, m, n, before[b.0].value.data(), k, &mut ga);
                accumulate(before, *a, ga);
            }
            if before[b.0].requires_grad {
                let mut gb = vec![0.0; k * n];
                mm_tn(before[a.0].value.data(), m, k, gout, n, &mut gb);
                accumulate(before, *b, gb);
            }
        }
        Op::MatmulNT(a, b) => {
            let (m, k) = before[a.0].value.dims2().unwrap();
            let (n, _) = before[b.0].value.dims2().unwrap();
            if before[a.0].requires_grad {
                let mut ga = vec![0.0; m * k];
                mm(gout, m, n, before[b.0].value.data(), k, &mut ga);
                accumulate(before, *a, ga);
            }
            if before[b.0].requires_grad {
                let mut gb = vec![0.0; n * k];
                mm_tn(gout, m, n, before[a.0].value.data(), k, &mut gb);
                accumulate(before, *b, gb);
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            stride,
            padding,
            cols,
        } => {
            let (t_in, c_in) = before[x.0].value.dims2().unwrap();
            let wshape = before[w.0].value.shape().to_vec();
            let (c_out, kw) = (wshape[0], wshape[2]);
            let t_out = gout.len() / c_out;
            if before[b.0].requires_grad {
                let mut gb = vec![0.0; c_out];
                for row in gout.chunks(c_out) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                accumulate(before, *b, gb);
            }
            if before[w.0].requires_grad {
                let mut gw = vec![0.0; c_out * c_in * kw];
                mm_tn(gout, t_out, c_out, cols, c_in * kw, &mut gw);
                accumulate(before, *w, gw);
            }
            if before[x.0].requires_grad {
                let mut gcols = vec![0.0; t_out * c_in * kw];
                mm(gout, t_out, c_out, before[w.0].value.data(), c_in * kw, &mut gcols);
                let mut gx = vec![0.0; t_in * c_in];
                for ti in 0..t_out {
                    let base = ti * c_in * kw;
                    for ki in 0..kw {
                        let src = ti * stride + ki;
                        if src < *padding || src - padding >= t_in {
                            continue;
                        }
                        let row = src - padding;
                        for ci in 0..c_in {
                            gx[row * c_in + ci] += gcols[base + ci * kw + ki];
                        }
                    }
                }
                accumulate(before, *x, gx);
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            inv_std,
            xhat,
        } => {
            let (rows, cols) = before[x.0].value.dims2().unwrap();
            let gd = val(*gamma, before);
            if before[beta.0].requires_grad {
                let mut gb = vec![0.0; cols];
                for row in gout.chunks(cols) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                accumulate(before, *beta, gb);
            }
            if before[gamma.0].requires_grad {
                let mut gg = vec![0.0; cols];
                for (r, row) in gout.chunks(cols).enumerate() {
                    for (c, &v) in row.iter().enumerate() {
                        gg[c] += v * xhat[r * cols + c];
                    }
                }
                accumulate(before, *gamma, gg);
            }
            if before[x.0].requires_grad {
                // Per column: gx = inv_std/N * (N*gxh - sum(gxh) - xh*sum(gxh*xh))
                let n = rows as f64;
                let mut sum_g = vec![0.0; cols];
                let mut sum_gx = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gxh = gout[r * cols + c] * gd[c];
                        sum_g[c] += gxh;
                        sum_gx[c] += gxh * xhat[r * cols + c];
                    }
                }
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gxh = gout[r * cols + c] * gd[c];
                        gx[r * cols + c] = inv_std[c] / n
                            * (n * gxh - sum_g[c] - xhat[r * cols + c] * sum_gx[c]);
                    }
                }
                accumulate(before, *x, gx);
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            inv_std,
            xhat,
        } => {
            let (rows, cols) = before[x.0].value.dims2().unwrap();
            let gd = val(*gamma, before);
            if before[beta.0].requires_grad {
                let mut gb = vec![0.0; cols];
                for row in gout.chunks(cols) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                accumulate(before, *beta, gb);
            }
            if before[gamma.0].requires_grad {
                let mut gg = vec![0.0; cols];
                for (r, row) in gout.chunks(cols).enumerate() {
                    for (c, &v) in row.iter().enumerate() {
                        gg[c] += v * xhat[r * cols + c];
                    }
                }
                accumulate(before, *gamma, gg);
            }
            if before[x.0].requires_grad {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = gout[r * cols + c] * gd[c] * inv_std[c];
                    }
                }
                accumulate(before, *x, gx);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            inv_std,
            xhat,
        } => {
            let (rows, cols) = before[x.0].value.dims2().unwrap();
            let gd = val(*gamma, before);
            if before[beta.0].requires_grad {
                let mut gb = vec![0.0; cols];
                for row in gout.chunks(cols) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                accumulate(before, *beta, gb);
            }
            if before[gamma.0].requires_grad {
                let mut gg = vec![0.0; cols];
                for (r, row) in gout.chunks(cols).enumerate() {
                    for (c, &v) in row.iter().enumerate() {
                        gg[c] += v * xhat[r * cols + c];
                    }
                }
                accumulate(before, *gamma, gg);
            }
            if before[x.0].requires_grad {
                let n = cols as f64;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for c in 0..cols {
                        let gxh = gout[r * cols + c] * gd[c];
                        sum_g += gxh;
                        sum_gx += gxh * xhat[r * cols + c];
                    }
                    for c in 0..cols {
                        let gxh = gout[r * cols + c] * gd[c];
                        gx[r * cols + c] =
                            inv_std[r] / n * (n * gxh - sum_g - xhat[r * cols + c] * sum_gx);
                    }
                }
                accumulate(before, *x, gx);
            }
        }
        Op::Relu(x) => {
            let xd = before[x.0].value.data();
            let gx: Vec<f64> = gout
                .iter()
                .zip(xd)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(before, *x, gx);
        }
        Op::Dropout { x, mask } => {
            let gx: Vec<f64> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(before, *x, gx);
        }
        Op::SoftmaxRows(x) | Op::MaskedSoftmaxRows(x) => {
            // Masked rows need no special casing: y is zero at disallowed
            // positions, which zeroes their gradient as well.
            let (rows, cols) = node.value.dims2().unwrap();
            let y = node.value.data();
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &gout[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    gx[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            accumulate(before, *x, gx);
        }
        Op::LogSoftmaxRows(x) => {
            let (rows, cols) = node.value.dims2().unwrap();
            let y = node.value.data();
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &gout[r * cols..(r + 1) * cols];
                let sum_g: f64 = gr.iter().sum();
                for c in 0..cols {
                    gx[r * cols + c] = gr[c] - yr[c].exp() * sum_g;
                }
            }
            accumulate(before, *x, gx);
        }
        Op::Scale(x, s) => {
            let gx: Vec<f64> = gout.iter().map(|g| g * s).collect();
            accumulate(before, *x, gx);
        }
        Op::ConcatRows(a, b) => {
            let na = before[a.0].value.numel();
            accumulate(before, *a, gout[..na].to_vec());
            accumulate(before, *b, gout[na..].to_vec());
        }
        Op::SliceRows { x, start, len } => {
            let (_, cols) = before[x.0].value.dims2().unwrap();
            let mut gx = vec![0.0; before[x.0].value.numel()];
            gx[start * cols..(start + len) * cols].copy_from_slice(gout);
            accumulate(before, *x, gx);
        }
        Op::SliceCols { x, start, len } => {
            let (rows, cols) = before[x.0].value.dims2().unwrap();
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                gx[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&gout[r * len..(r + 1) * len]);
            }
            accumulate(before, *x, gx);
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.dims2().unwrap().0;
            let total = node.value.dims2().unwrap().1;
            let mut offset = 0usize;
            for &p in parts {
                let w = before[p.0].value.dims2().unwrap().1;
                let mut gp = vec![0.0; rows * w];
                for r in 0..rows {
                    gp[r * w..(r + 1) * w]
                        .copy_from_slice(&gout[r * total + offset..r * total + offset + w]);
                }
                accumulate(before, p, gp);
                offset += w;
            }
        }
        Op::Embedding { table, ids } => {
            let (_, cols) = before[table.0].value.dims2().unwrap();
            let mut gt = vec![0.0; before[table.0].value.numel()];
            for (i, &id) in ids.iter().enumerate() {
                for c in 0..cols {
                    gt[id * cols + c] += gout[i * cols + c];
                }
            }
            accumulate(before, *table, gt);
        }
        Op::Pick { x, index } => {
            let mut gx = vec![0.0; before[x.0].value.numel()];
            gx[*index] = gout[0];
            accumulate(before, *x, gx);
        }
        Op::Sum(x) => {
            let gx = vec![gout[0]; before[x.0].value.numel()];
            accumulate(before, *x, gx);
        }
        Op::ExternalScalar { x, grad } => {
            let gx: Vec<f64> = grad.iter().map(|g| g * gout[0]).collect();
            accumulate(before, *x, gx);
        }
    }
}

/// Compares the analytic gradient of a scalar-valued tape function against
/// central finite differences; returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("step size must be positive"));
    }
    let mut g = Graph::new();
    let vx = g.leaf(x.clone(), true);
    let loss = f(&mut g, vx)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::invalid("grad_check target must be scalar"));
    }
    g.backward(loss)?;
    let analytic = g
        .grad(vx)
        .ok_or_else(|| Error::invalid("no gradient reached the input"))?
        .to_vec();

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(probe.clone(), false);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
