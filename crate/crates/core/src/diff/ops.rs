//! Primitive operations and their adjoints.
//!
//! Matrices are row-major `[rows, cols]`. Row-wise primitives compute each row
//! independently, and [`Tensor::matmul`] accumulates every output element in
//! the same order regardless of how many rows are multiplied, so evaluating a
//! batch or a single row gives bit-identical results.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    SafeRecip(Tensor),
    ClampMin(Tensor, f64),
    Sum(Tensor),
    Expand(Tensor),
    SumRows(Tensor),
    BroadcastRows(Tensor),
    SumCols(Tensor),
    BroadcastCols(Tensor),
    NormRows(Tensor),
    SoftmaxRows(Tensor),
    LogSoftmaxRows(Tensor),
    Concat(Vec<Tensor>),
    Slice(Tensor, usize),
    Pad(Tensor, usize),
    Reshape(Tensor),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            Transpose(a) | Scale(a, _) | Relu(a) | Exp(a) | Ln(a) | SafeRecip(a)
            | ClampMin(a, _) | Sum(a) | Expand(a) | SumRows(a) | BroadcastRows(a)
            | SumCols(a) | BroadcastCols(a) | NormRows(a) | SoftmaxRows(a)
            | LogSoftmaxRows(a) | Slice(a, _) | Pad(a, _) | Reshape(a) => vec![a],
            Concat(parts) => parts.iter().collect(),
        }
    }

    /// Vector-Jacobian products for every parent accepted by `needed`, given the
    /// output `out` and its incoming gradient `g`.
    pub(crate) fn backward(
        &self,
        out: &Tensor,
        g: &Tensor,
        needed: &dyn Fn(&Tensor) -> bool,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        use Op::*;
        let mut grads = Vec::new();
        let mut push = |p: &Tensor, f: &dyn Fn() -> Result<Tensor>| -> Result<()> {
            if needed(p) {
                grads.push((p.clone(), f()?));
            }
            Ok(())
        };
        match self {
            MatMul(a, b) => {
                push(a, &|| g.matmul(&b.transpose()?))?;
                push(b, &|| a.transpose()?.matmul(g))?;
            }
            Transpose(a) => push(a, &|| g.transpose())?,
            Add(a, b) => {
                push(a, &|| Ok(g.clone()))?;
                push(b, &|| Ok(g.clone()))?;
            }
            Sub(a, b) => {
                push(a, &|| Ok(g.clone()))?;
                push(b, &|| Ok(g.neg()))?;
            }
            Mul(a, b) => {
                push(a, &|| g.mul(b))?;
                push(b, &|| g.mul(a))?;
            }
            Div(a, b) => {
                push(a, &|| g.div(b))?;
                push(b, &|| Ok(g.div(b)?.mul(out)?.neg()))?;
            }
            Scale(a, c) => push(a, &|| Ok(g.scale(*c)))?,
            Relu(a) => push(a, &|| g.mul(&mask(a, |v| v > 0.0)))?,
            Exp(a) => push(a, &|| g.mul(out))?,
            Ln(a) => push(a, &|| g.div(a))?,
            SafeRecip(a) => push(a, &|| Ok(g.mul(&out.mul(out)?)?.neg()))?,
            ClampMin(a, lo) => {
                let lo = *lo;
                push(a, &|| g.mul(&mask(a, |v| v >= lo)))?
            }
            Sum(a) => push(a, &|| g.expand(a.shape()))?,
            Expand(a) => push(a, &|| g.sum().reshape(a.shape()))?,
            SumRows(a) => push(a, &|| g.broadcast_rows(a.shape()[0]))?,
            BroadcastRows(a) => push(a, &|| g.sum_rows())?,
            SumCols(a) => push(a, &|| g.broadcast_cols(a.shape()[1]))?,
            BroadcastCols(a) => push(a, &|| g.sum_cols())?,
            NormRows(a) => push(a, &|| {
                let cols = a.shape()[1];
                g.mul(&out.safe_recip())?.broadcast_cols(cols)?.mul(a)
            })?,
            SoftmaxRows(a) => push(a, &|| {
                let cols = a.shape()[1];
                let inner = g.mul(out)?.sum_cols()?.broadcast_cols(cols)?;
                out.mul(&g.sub(&inner)?)
            })?,
            LogSoftmaxRows(a) => push(a, &|| {
                let cols = a.shape()[1];
                let total = g.sum_cols()?.broadcast_cols(cols)?;
                g.sub(&out.exp().mul(&total)?)
            })?,
            Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = p.shape()[0];
                    push(p, &|| g.slice_rows(start, start + len))?;
                    start += len;
                }
            }
            Slice(a, start) => push(a, &|| g.pad_rows(*start, a.shape()[0]))?,
            Pad(a, start) => push(a, &|| g.slice_rows(*start, *start + a.shape()[0]))?,
            Reshape(a) => push(a, &|| g.reshape(a.shape()))?,
        }
        Ok(grads)
    }
}

fn mask(a: &Tensor, keep: impl Fn(f64) -> bool) -> Tensor {
    let data = a.data().iter().map(|&v| if keep(v) { 1.0 } else { 0.0 }).collect();
    Tensor::new(data, a.shape()).expect("mask preserves shape")
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

impl Tensor {
    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op)
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape(name, self.shape(), other.shape()));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            op(self.clone(), other.clone()),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let data = matmul_kernel(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::from_op(data, vec![n, m], Op::Transpose(self.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|v| v * c, Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, Op::Ln(self.clone()))
    }

    /// `1 / x`, with `0` mapped to `0`.
    pub fn safe_recip(&self) -> Tensor {
        self.unary(
            |v| if v == 0.0 { 0.0 } else { 1.0 / v },
            Op::SafeRecip(self.clone()),
        )
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.unary(|v| v.max(lo), Op::ClampMin(self.clone(), lo))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![], Op::Sum(self.clone()))
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(Error::shape("expand", self.shape(), shape));
        }
        let n = shape.iter().product();
        Ok(Tensor::from_op(
            vec![self.data()[0]; n],
            shape.to_vec(),
            Op::Expand(self.clone()),
        ))
    }

    /// Column sums of `[m, n]`, shape `[n]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("sum_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Ok(Tensor::from_op(out, vec![n], Op::SumRows(self.clone())))
    }

    /// Stack `m` copies of a length-`n` vector into `[m, n]`.
    pub fn broadcast_rows(&self, m: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::invalid(
                "broadcast_rows",
                format!("expected a vector, got shape {:?}", self.shape()),
            ));
        }
        let n = self.numel();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(self.data());
        }
        Ok(Tensor::from_op(data, vec![m, n], Op::BroadcastRows(self.clone())))
    }

    /// Row sums of `[m, n]`, shape `[m]`.
    pub fn sum_cols(&self) -> Result<Tensor> {
        let (m, _) = self.dims2("sum_cols")?;
        let out = (0..m).map(|i| self.row(i).iter().sum()).collect();
        Ok(Tensor::from_op(out, vec![m], Op::SumCols(self.clone())))
    }

    /// Repeat each element of a length-`m` vector across `n` columns.
    pub fn broadcast_cols(&self, n: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::invalid(
                "broadcast_cols",
                format!("expected a vector, got shape {:?}", self.shape()),
            ));
        }
        let m = self.numel();
        let mut data = Vec::with_capacity(m * n);
        for &v in self.data() {
            data.extend(std::iter::repeat_n(v, n));
        }
        Ok(Tensor::from_op(data, vec![m, n], Op::BroadcastCols(self.clone())))
    }

    /// Euclidean norm of each row of `[m, n]`, shape `[m]`. The adjoint at a
    /// zero row is taken to be zero.
    pub fn norm_rows(&self) -> Result<Tensor> {
        let (m, _) = self.dims2("norm_rows")?;
        let out = (0..m)
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Tensor::from_op(out, vec![m], Op::NormRows(self.clone())))
    }

    /// Softmax of each row, computed after subtracting the row maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = self.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|v| (v - max).exp()));
            let total: f64 = data[start..].iter().sum();
            for v in &mut data[start..] {
                *v /= total;
            }
        }
        Ok(Tensor::from_op(data, vec![m, n], Op::SoftmaxRows(self.clone())))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("log_softmax_rows")?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = self.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            Op::LogSoftmaxRows(self.clone()),
        ))
    }

    /// Concatenate along the leading dimension.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no tensors given"))?;
        if first.rank() == 0 {
            return Err(Error::invalid("concat", "scalars have no leading dimension"));
        }
        let trailing = &first.shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape()[1..] != trailing {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            rows += p.shape()[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        Ok(Tensor::from_op(data, shape, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() == 0 || start > end || end > self.shape()[0] {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{end} out of bounds for shape {:?}", self.shape()),
            ));
        }
        let row = self.numel() / self.shape()[0].max(1);
        let data = self.data()[start * row..end * row].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        Ok(Tensor::from_op(data, shape, Op::Slice(self.clone(), start)))
    }

    /// Place this tensor at row `start` of a zero tensor with `total` rows.
    pub fn pad_rows(&self, start: usize, total: usize) -> Result<Tensor> {
        if self.rank() == 0 || start + self.shape()[0] > total {
            return Err(Error::invalid(
                "pad_rows",
                format!("cannot place {:?} at row {start} of {total}", self.shape()),
            ));
        }
        let row = if self.shape()[0] == 0 {
            self.shape()[1..].iter().product()
        } else {
            self.numel() / self.shape()[0]
        };
        let mut data = vec![0.0; total * row];
        data[start * row..start * row + self.numel()].copy_from_slice(self.data());
        let mut shape = self.shape().to_vec();
        shape[0] = total;
        Ok(Tensor::from_op(data, shape, Op::Pad(self.clone(), start)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    // Composites.

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Multiply every element by a one-element tensor.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        self.mul(&s.expand(self.shape())?)
    }

    /// `[m, n] + [n]`, adding the vector to every row.
    pub fn add_row_vector(&self, v: &Tensor) -> Result<Tensor> {
        let (m, _) = self.dims2("add_row_vector")?;
        self.add(&v.broadcast_rows(m)?)
    }

    /// Scale row `i` of `[m, n]` by `v[i]`.
    pub fn mul_col_vector(&self, v: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2("mul_col_vector")?;
        self.mul(&v.broadcast_cols(n)?)
    }

    /// Divide every row by its Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        self.mul_col_vector(&self.norm_rows()?.safe_recip())
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&self) -> Result<Tensor> {
        self.reshape(&[1, self.numel()])?.norm_rows()?.reshape(&[])
    }
}
