//! Forward primitives and their reverse rules.
//!
//! Every op validates operand shapes and names itself in shape errors. The
//! primitive set is exactly what the encoder/decoder, tip predictor, and
//! composite loss need; nothing speculative.

use crate::error::{Error, Result};
use crate::rng::counter_uniform;

use super::{Node, Op, Tape, Tensor};

/// Geometry of an unfold (im2col) operation over a (channels, height*width)
/// input laid out row-major per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnfoldSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl UnfoldSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_rows(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn out_cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

fn shape_err(op: &str, msg: String) -> Error {
    Error::shape(op, msg)
}

fn require_2d(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected rank-2 tensor, got {s:?}"))),
    }
}

/// Raw row-major matrix product: (m,k) x (k,n) -> (m,n).
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn dropout_mask(seed: u64, key: u64, rate: f64, len: usize) -> Vec<f64> {
    let keep = 1.0 - rate;
    let stream = crate::rng::splitmix64(seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..len)
        .map(|i| {
            if counter_uniform(stream, i as u64) >= rate {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

impl Tape {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d("matmul", a)?;
        let (k2, n) = require_2d("matmul", b)?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: ({m},{k}) x ({k2},{n})"),
            ));
        }
        let value = matmul_raw(a.data(), b.data(), m, k, n);
        Ok(self.record(Op::Matmul, &[a, b], value, vec![m, n], Vec::new()))
    }

    fn binary_elementwise(
        &self,
        op_name: &str,
        op: fn(bool) -> Op,
        f: fn(f64, f64) -> f64,
        a: &Tensor,
        b: &Tensor,
    ) -> Result<Tensor> {
        if a.shape() == b.shape() {
            let value = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            return Ok(self.record(op(false), &[a, b], value, a.shape().to_vec(), Vec::new()));
        }
        // row broadcast: (m,n) op (n,) or (1,n)
        let (m, n) = require_2d(op_name, a)?;
        let blen = b.data().len();
        let b_is_row = b.shape() == [n] || b.shape() == [1, n];
        if !b_is_row || blen != n {
            return Err(shape_err(
                op_name,
                format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
            ));
        }
        let mut value = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                value.push(f(a.data()[r * n + c], b.data()[c]));
            }
        }
        Ok(self.record(op(true), &[a, b], value, vec![m, n], Vec::new()))
    }

    /// Elementwise sum; the right operand may be a row vector broadcast over rows.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("add", |broadcast| Op::Add { broadcast }, |x, y| x + y, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("sub", |broadcast| Op::Sub { broadcast }, |x, y| x - y, a, b)
    }

    /// Elementwise product; same broadcast rule as [`Tape::add`].
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("mul", |broadcast| Op::Mul { broadcast }, |x, y| x * y, a, b)
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let value = a.data().iter().map(|x| x * factor).collect();
        Ok(self.record(Op::Scale(factor), &[a], value, a.shape().to_vec(), Vec::new()))
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let value = a.data().iter().map(|x| x + c).collect();
        Ok(self.record(Op::AddScalar, &[a], value, a.shape().to_vec(), Vec::new()))
    }

    /// Row-wise softmax. Entries of -inf are legal (masked positions) and map
    /// to exactly 0.
    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = require_2d("softmax-rows", a)?;
        let mut value = vec![0.0; m * n];
        for r in 0..m {
            let row = &a.data()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut value[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                let e = (x - max).exp();
                *o = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.record(Op::SoftmaxRows, &[a], value, vec![m, n], Vec::new()))
    }

    /// Row-wise layer normalization with affine parameters:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layernorm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let (m, n) = require_2d("layernorm", x)?;
        if gamma.data().len() != n || beta.data().len() != n {
            return Err(shape_err(
                "layernorm",
                format!("affine params must have length {n}"),
            ));
        }
        let mut value = vec![0.0; m * n];
        // saved: per-row inv_std followed by xhat
        let mut saved = Vec::with_capacity(m + m * n);
        let mut xhat_all = vec![0.0; m * n];
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            saved.push(inv);
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                xhat_all[r * n + c] = xh;
                value[r * n + c] = gamma.data()[c] * xh + beta.data()[c];
            }
        }
        saved.extend_from_slice(&xhat_all);
        Ok(self.record(Op::LayerNorm, &[x, gamma, beta], value, vec![m, n], saved))
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        let value = a.data().iter().map(|&x| x * gauss_cdf(x)).collect();
        Ok(self.record(Op::Gelu, &[a], value, a.shape().to_vec(), Vec::new()))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let value = a.data().iter().map(|&x| x.max(0.0)).collect();
        Ok(self.record(Op::Relu, &[a], value, a.shape().to_vec(), Vec::new()))
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let value = a.data().iter().map(|&x| stable_sigmoid(x)).collect();
        Ok(self.record(Op::Sigmoid, &[a], value, a.shape().to_vec(), Vec::new()))
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        let value = a.data().iter().map(|&x| x.ln()).collect();
        Ok(self.record(Op::Log, &[a], value, a.shape().to_vec(), Vec::new()))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        let value = a.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        Ok(self.record(
            Op::Clamp { lo, hi },
            &[a],
            value,
            a.shape().to_vec(),
            Vec::new(),
        ))
    }

    /// Inverted dropout. Identity when the tape is in eval mode or rate is 0.
    pub fn dropout(&self, a: &Tensor, rate: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::domain(format!("dropout rate {rate} not in [0,1)")));
        }
        let key = self.next_op_key();
        if !self.is_training() || rate == 0.0 {
            return Ok(a.clone());
        }
        let mask = dropout_mask(self.dropout_seed(), key, rate, a.data().len());
        let value = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.record(
            Op::Dropout { rate, key },
            &[a],
            value,
            a.shape().to_vec(),
            Vec::new(),
        ))
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.data().len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", a.shape()),
            ));
        }
        let value = a.data().to_vec();
        Ok(self.record(Op::Reshape, &[a], value, shape, Vec::new()))
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = require_2d("transpose", a)?;
        let value = transpose_raw(a.data(), m, n);
        Ok(self.record(Op::Transpose, &[a], value, vec![n, m], Vec::new()))
    }

    /// Concatenation of rank-2 tensors along rows (axis 0) or columns (axis 1).
    pub fn concat(&self, axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no tensors given".into()));
        }
        if axis > 1 {
            return Err(shape_err("concat", format!("axis {axis} out of range")));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|t| require_2d("concat", t))
            .collect::<Result<_>>()?;
        let same = dims.iter().all(|d| {
            if axis == 0 {
                d.1 == dims[0].1
            } else {
                d.0 == dims[0].0
            }
        });
        if !same {
            return Err(shape_err("concat", "mismatched cross dimensions".into()));
        }
        let (shape, value) = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let cols = dims[0].1;
            let mut v = Vec::with_capacity(rows * cols);
            for t in parts {
                v.extend_from_slice(t.data());
            }
            (vec![rows, cols], v)
        } else {
            let rows = dims[0].0;
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut v = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (t, d) in parts.iter().zip(&dims) {
                    v.extend_from_slice(&t.data()[r * d.1..(r + 1) * d.1]);
                }
            }
            (vec![rows, cols], v)
        };
        self.record_concat(axis, parts, value, shape)
    }

    fn record_concat(
        &self,
        axis: usize,
        parts: &[&Tensor],
        value: Vec<f64>,
        shape: Vec<usize>,
    ) -> Result<Tensor> {
        Ok(self.record(Op::Concat { axis }, parts, value, shape, Vec::new()))
    }

    /// Contiguous slice `start..end` along rows (axis 0) or columns (axis 1).
    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = require_2d("slice", a)?;
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || start >= end || end > bound {
            return Err(shape_err(
                "slice",
                format!("range {start}..{end} invalid for axis {axis} of ({m},{n})"),
            ));
        }
        let (shape, value) = if axis == 0 {
            (
                vec![end - start, n],
                a.data()[start * n..end * n].to_vec(),
            )
        } else {
            let mut v = Vec::with_capacity((end - start) * m);
            for r in 0..m {
                v.extend_from_slice(&a.data()[r * n + start..r * n + end]);
            }
            (vec![m, end - start], v)
        };
        Ok(self.record(Op::Slice { axis, start }, &[a], value, shape, Vec::new()))
    }

    /// Gather rows of `table` at the given indices.
    pub fn embedding_lookup(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, e) = require_2d("embedding-lookup", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err(
                "embedding-lookup",
                format!("index {bad} out of range for table with {v} rows"),
            ));
        }
        let mut value = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            value.extend_from_slice(&table.data()[i * e..(i + 1) * e]);
        }
        Ok(self.record(
            Op::EmbeddingLookup { ids: ids.to_vec() },
            &[table],
            value,
            vec![ids.len(), e],
            Vec::new(),
        ))
    }

    /// im2col over a (channels, height*width) tensor; output row per spatial
    /// position, columns ordered channel-major then kernel row then column.
    pub fn unfold(&self, a: &Tensor, spec: UnfoldSpec) -> Result<Tensor> {
        let (c, hw) = require_2d("unfold", a)?;
        if c != spec.channels || hw != spec.height * spec.width {
            return Err(shape_err(
                "unfold",
                format!(
                    "input {:?} does not match spec {}x{}x{}",
                    a.shape(),
                    spec.channels,
                    spec.height,
                    spec.width
                ),
            ));
        }
        let (oh, ow, k) = (spec.out_height(), spec.out_width(), spec.kernel);
        let mut value = vec![0.0; oh * ow * spec.out_cols()];
        let mut idx = 0;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..spec.channels {
                    let plane = &a.data()[ch * hw..(ch + 1) * hw];
                    for ky in 0..k {
                        let y = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        for kx in 0..k {
                            let x = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if y >= 0
                                && (y as usize) < spec.height
                                && x >= 0
                                && (x as usize) < spec.width
                            {
                                value[idx] = plane[y as usize * spec.width + x as usize];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
        Ok(self.record(
            Op::Unfold { spec },
            &[a],
            value,
            vec![oh * ow, spec.out_cols()],
            Vec::new(),
        ))
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let value = vec![a.data().iter().sum::<f64>()];
        Ok(self.record(Op::Sum, &[a], value, vec![1], Vec::new()))
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.data().len() as f64;
        let value = vec![a.data().iter().sum::<f64>() / n];
        Ok(self.record(Op::Mean, &[a], value, vec![1], Vec::new()))
    }
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_backward(node: &Node, grad_out: &[f64], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    node.inputs[0]
        .value
        .iter()
        .enumerate()
        .zip(grad_out)
        .map(|((i, &x), g)| g * f(i, x))
        .collect()
}

/// Reverse rule dispatch; returns one optional gradient per node input
/// (None for inputs that do not require grad).
pub(crate) fn backward_node(
    node: &Node,
    grad_out: &[f64],
    dropout_seed: u64,
) -> Result<Vec<Option<Vec<f64>>>> {
    let needs: Vec<bool> = node.inputs.iter().map(|i| i.node.is_some()).collect();
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Matmul => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            let da = needs[0].then(|| {
                // dA = dC * B^T
                let bt = transpose_raw(&b.value, k, n);
                matmul_raw(grad_out, &bt, m, n, k)
            });
            let db = needs[1].then(|| {
                // dB = A^T * dC
                let at = transpose_raw(&a.value, m, k);
                matmul_raw(&at, grad_out, k, m, n)
            });
            vec![da, db]
        }
        Op::Add { broadcast } => {
            let da = needs[0].then(|| grad_out.to_vec());
            let db = needs[1].then(|| reduce_broadcast(node, grad_out, *broadcast, 1.0, None));
            vec![da, db]
        }
        Op::Sub { broadcast } => {
            let da = needs[0].then(|| grad_out.to_vec());
            let db = needs[1].then(|| reduce_broadcast(node, grad_out, *broadcast, -1.0, None));
            vec![da, db]
        }
        Op::Mul { broadcast } => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            let da = needs[0].then(|| {
                if *broadcast {
                    let n = b.value.len();
                    grad_out
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * b.value[i % n])
                        .collect()
                } else {
                    grad_out.iter().zip(b.value.iter()).map(|(g, y)| g * y).collect()
                }
            });
            let db = needs[1].then(|| {
                reduce_broadcast(node, grad_out, *broadcast, 1.0, Some(&a.value))
            });
            vec![da, db]
        }
        Op::Scale(f) => vec![needs[0].then(|| grad_out.iter().map(|g| g * f).collect())],
        Op::AddScalar => vec![needs[0].then(|| grad_out.to_vec())],
        Op::SoftmaxRows => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let y = &node.value;
            let da = needs[0].then(|| {
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &grad_out[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                dx
            });
            vec![da]
        }
        Op::LayerNorm => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let inv = &node.saved[..m];
            let xhat = &node.saved[m..];
            let gamma = &node.inputs[1].value;
            let dx = needs[0].then(|| {
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &grad_out[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let dxhat: Vec<f64> = gr.iter().zip(gamma.iter()).map(|(g, gm)| g * gm).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        out[r * n + c] =
                            inv[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                    }
                }
                out
            });
            let dgamma = needs[1].then(|| {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        out[c] += grad_out[r * n + c] * xhat[r * n + c];
                    }
                }
                out
            });
            let dbeta = needs[2].then(|| {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        out[c] += grad_out[r * n + c];
                    }
                }
                out
            });
            vec![dx, dgamma, dbeta]
        }
        Op::Gelu => vec![needs[0].then(|| {
            unary_backward(node, grad_out, |_, x| gauss_cdf(x) + x * gauss_pdf(x))
        })],
        Op::Relu => vec![needs[0].then(|| {
            unary_backward(node, grad_out, |_, x| if x > 0.0 { 1.0 } else { 0.0 })
        })],
        Op::Sigmoid => {
            let y = node.value.clone();
            vec![needs[0].then(|| {
                grad_out
                    .iter()
                    .zip(y.iter())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect()
            })]
        }
        Op::Log => vec![needs[0].then(|| unary_backward(node, grad_out, |_, x| 1.0 / x))],
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            vec![needs[0].then(|| {
                unary_backward(node, grad_out, |_, x| {
                    if x > lo && x < hi {
                        1.0
                    } else {
                        0.0
                    }
                })
            })]
        }
        Op::Dropout { rate, key } => {
            let mask = dropout_mask(dropout_seed, *key, *rate, grad_out.len());
            vec![needs[0].then(|| grad_out.iter().zip(&mask).map(|(g, m)| g * m).collect())]
        }
        Op::Reshape => vec![needs[0].then(|| grad_out.to_vec())],
        Op::Transpose => {
            let (m, n) = (node.inputs[0].shape[0], node.inputs[0].shape[1]);
            vec![needs[0].then(|| transpose_raw(grad_out, n, m))]
        }
        Op::Concat { axis } => {
            let mut grads = Vec::with_capacity(node.inputs.len());
            if *axis == 0 {
                let mut offset = 0;
                for (inp, need) in node.inputs.iter().zip(&needs) {
                    let len = inp.value.len();
                    grads.push(need.then(|| grad_out[offset..offset + len].to_vec()));
                    offset += len;
                }
            } else {
                let rows = node.shape[0];
                let total_cols = node.shape[1];
                let mut col_offset = 0;
                for (inp, need) in node.inputs.iter().zip(&needs) {
                    let cols = inp.shape[1];
                    grads.push(need.then(|| {
                        let mut g = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let base = r * total_cols + col_offset;
                            g.extend_from_slice(&grad_out[base..base + cols]);
                        }
                        g
                    }));
                    col_offset += cols;
                }
            }
            grads
        }
        Op::Slice { axis, start } => {
            let (m, n) = (node.inputs[0].shape[0], node.inputs[0].shape[1]);
            let da = needs[0].then(|| {
                let mut g = vec![0.0; m * n];
                if *axis == 0 {
                    let rows = node.shape[0];
                    g[start * n..(start + rows) * n].copy_from_slice(grad_out);
                } else {
                    let cols = node.shape[1];
                    for r in 0..m {
                        for c in 0..cols {
                            g[r * n + start + c] = grad_out[r * cols + c];
                        }
                    }
                }
                g
            });
            vec![da]
        }
        Op::EmbeddingLookup { ids } => {
            let (v, e) = (node.inputs[0].shape[0], node.inputs[0].shape[1]);
            let da = needs[0].then(|| {
                let mut g = vec![0.0; v * e];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..e {
                        g[id * e + c] += grad_out[row * e + c];
                    }
                }
                g
            });
            vec![da]
        }
        Op::Unfold { spec } => {
            let da = needs[0].then(|| {
                let hw = spec.height * spec.width;
                let mut g = vec![0.0; spec.channels * hw];
                let (oh, ow, k) = (spec.out_height(), spec.out_width(), spec.kernel);
                let mut idx = 0;
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..spec.channels {
                            for ky in 0..k {
                                let y = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                for kx in 0..k {
                                    let x = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if y >= 0
                                        && (y as usize) < spec.height
                                        && x >= 0
                                        && (x as usize) < spec.width
                                    {
                                        g[ch * hw + y as usize * spec.width + x as usize] +=
                                            grad_out[idx];
                                    }
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
                g
            });
            vec![da]
        }
        Op::Sum => {
            let len = node.inputs[0].value.len();
            vec![needs[0].then(|| vec![grad_out[0]; len])]
        }
        Op::Mean => {
            let len = node.inputs[0].value.len();
            vec![needs[0].then(|| vec![grad_out[0] / len as f64; len])]
        }
    };
    Ok(out)
}

/// Gradient for the (possibly broadcast) right operand of add/sub/mul.
fn reduce_broadcast(
    node: &Node,
    grad_out: &[f64],
    broadcast: bool,
    sign: f64,
    mul_by: Option<&[f64]>,
) -> Vec<f64> {
    if !broadcast {
        return grad_out
            .iter()
            .enumerate()
            .map(|(i, g)| sign * g * mul_by.map_or(1.0, |a| a[i]))
            .collect();
    }
    let n = node.inputs[1].value.len();
    let mut out = vec![0.0; n];
    for (i, g) in grad_out.iter().enumerate() {
        out[i % n] += sign * g * mul_by.map_or(1.0, |a| a[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, TensorValue};

    fn t2(rows: &[&[f64]]) -> TensorValue {
        let r = rows.len();
        let c = rows[0].len();
        TensorValue::new(vec![r, c], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[test]
    fn softmax_symmetry_and_rowsum() {
        let tape = Tape::new();
        let x = Tensor::constant(t2(&[&[0.0, 0.0]]));
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let x = Tensor::constant(t2(&[&[1.0, -2.0, 0.3], &[5.0, 5.0, -1.0]]));
        let y = tape.softmax_rows(&x).unwrap();
        for r in 0..2 {
            let s: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.data()[r * 3..(r + 1) * 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let tape = Tape::new();
        let x = Tensor::constant(t2(&[&[1.0, f64::NEG_INFINITY, 2.0]]));
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_fixes_zero_and_matmul_identity() {
        let tape = Tape::new();
        let x = Tensor::constant(t2(&[&[0.0]]));
        assert_eq!(tape.gelu(&x).unwrap().data(), &[0.0]);

        let a = Tensor::constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let eye = Tensor::constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let y = tape.matmul(&a, &eye).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let tape = Tape::new();
        let a = Tensor::constant(t2(&[&[1.0, 2.0]]));
        let b = Tensor::constant(t2(&[&[1.0, 2.0]]));
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let tape = Tape::new();
        let x = Tensor::constant(t2(&[&[1.0, 2.0, 3.0, 4.0], &[-5.0, 0.0, 5.0, 10.0]]));
        let gamma = Tensor::constant(TensorValue::new(vec![4], vec![1.0; 4]));
        let beta = Tensor::constant(TensorValue::new(vec![4], vec![0.0; 4]));
        let y = tape.layernorm(&x, &gamma, &beta).unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn dropout_eval_identity_and_train_determinism() {
        let x = Tensor::constant(TensorValue::new(vec![2, 4], (0..8).map(f64::from).collect()));
        let eval = Tape::new();
        assert_eq!(eval.dropout(&x, 0.5).unwrap().data(), x.data());

        let t1 = Tape::training(9);
        let t2 = Tape::training(9);
        let a = t1.dropout(&x, 0.5).unwrap();
        let b = t2.dropout(&x, 0.5).unwrap();
        assert_eq!(a.data(), b.data());
        let t3 = Tape::training(10);
        let c = t3.dropout(&x, 0.5).unwrap();
        assert_ne!(a.data(), c.data());

        // rate 0 in train mode equals eval mode
        let t4 = Tape::training(9);
        assert_eq!(t4.dropout(&x, 0.0).unwrap().data(), x.data());
    }

    #[test]
    fn concat_slice_round_trip() {
        let tape = Tape::new();
        let a = Tensor::constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = Tensor::constant(t2(&[&[5.0], &[6.0]]));
        let cat = tape.concat(1, &[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert_eq!(cat.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(&cat, 1, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
        let rows = tape.concat(0, &[&a, &a]).unwrap();
        assert_eq!(rows.shape(), &[4, 2]);
        let tail = tape.slice(&rows, 0, 2, 4).unwrap();
        assert_eq!(tail.data(), a.data());
    }

    #[test]
    fn embedding_lookup_gathers_rows() {
        let tape = Tape::new();
        let table = Tensor::constant(t2(&[&[1.0, 1.5], &[2.0, 2.5], &[3.0, 3.5]]));
        let y = tape.embedding_lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[3.0, 3.5, 1.0, 1.5, 3.0, 3.5]);
        assert!(tape.embedding_lookup(&table, &[3]).is_err());
    }

    #[test]
    fn unfold_matches_hand_computed_patch() {
        let tape = Tape::new();
        // 1 channel, 3x3 image, 2x2 kernel, stride 1, no padding
        let img = Tensor::constant(TensorValue::new(
            vec![1, 9],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let spec = UnfoldSpec {
            channels: 1,
            height: 3,
            width: 3,
            kernel: 2,
            stride: 1,
            pad: 0,
        };
        let y = tape.unfold(&img, spec).unwrap();
        assert_eq!(y.shape(), &[4, 4]);
        assert_eq!(
            y.data(),
            &[
                1.0, 2.0, 4.0, 5.0, //
                2.0, 3.0, 5.0, 6.0, //
                4.0, 5.0, 7.0, 8.0, //
                5.0, 6.0, 8.0, 9.0
            ]
        );
    }

    #[test]
    fn backward_square_function() {
        let tape = Tape::new();
        let x = tape.leaf(TensorValue::scalar(3.0));
        let y = tape.mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.grad(&x).unwrap().data, vec![6.0]);
    }

    #[test]
    fn backward_softmax_sum_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(TensorValue::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.0]));
        let s = tape.softmax_rows(&x).unwrap();
        let loss = tape.sum(&s).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for g in &grads.grad(&x).unwrap().data {
            assert!(g.abs() < 1e-14, "grad {g}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(TensorValue::new(vec![1, 2], vec![1.0, 2.0]));
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn constants_do_not_record_nodes() {
        let tape = Tape::new();
        let a = Tensor::constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = Tensor::constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let _ = tape.matmul(&a, &b).unwrap();
        let _ = tape.gelu(&a).unwrap();
        assert_eq!(tape.num_nodes(), 0);
    }
}
