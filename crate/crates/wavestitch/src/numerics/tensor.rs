use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

/// Dense row-major tensor. Rank 1 or 2 covers everything the pipeline needs;
/// a scalar is shape `[1]`.
///
/// Every operation checks its output for NaN/Inf and fails loudly instead of
/// letting non-finite values propagate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// How the right operand of `add`/`mul` maps onto the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand is a single value.
    Scalar,
    /// Right operand is one row, repeated over the leading axis.
    Row,
}

pub(crate) fn broadcast_kind(left: &[usize], right: &[usize]) -> Option<Broadcast> {
    if left == right {
        return Some(Broadcast::Same);
    }
    let rn: usize = right.iter().product();
    if rn == 1 {
        return Some(Broadcast::Scalar);
    }
    if left.len() == 2 {
        let cols = left[1];
        if right == [cols] || right == [1, cols] {
            return Some(Broadcast::Row);
        }
    }
    None
}

fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(Error::ShapeLenMismatch {
                shape,
                len: data.len(),
            });
        }
        check_finite("tensor::new", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; numel])
    }

    pub fn scalar(v: S) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Option<S> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Row count; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count; for rank-1 this is the length.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.shape[0]
        }
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    fn same_shape(&self, rhs: &Self, op: &'static str) -> Result<()> {
        if self.shape == rhs.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            })
        }
    }

    /// Matrix product; both operands must be rank 2 with matching inner size.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let src = &rhs.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src.iter()) {
                    *d += a * b;
                }
            }
        }
        check_finite("matmul", &out)?;
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    fn zip_broadcast(
        &self,
        rhs: &Self,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Self> {
        let kind = broadcast_kind(&self.shape, &rhs.shape).ok_or(Error::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: rhs.shape.clone(),
        })?;
        let data: Vec<S> = match kind {
            Broadcast::Same => self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            Broadcast::Scalar => {
                let b = rhs.data[0];
                self.data.iter().map(|&a| f(a, b)).collect()
            }
            Broadcast::Row => {
                let cols = self.cols();
                self.data
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| f(a, rhs.data[i % cols]))
                    .collect()
            }
        };
        check_finite(op, &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise sum; the right operand may be a scalar or a single row.
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_broadcast(rhs, "add", |a, b| a + b)
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "sub")?;
        self.zip_broadcast(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise product; the right operand may be a scalar or a single row.
    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_broadcast(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: S) -> Result<Self> {
        let data: Vec<S> = self.data.iter().map(|&a| a * factor).collect();
        check_finite("scale", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(S) -> S) -> Result<Self> {
        let data: Vec<S> = self.data.iter().map(|&a| f(a)).collect();
        check_finite(op, &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Mean squared difference against a same-shape tensor.
    pub fn mse(&self, rhs: &Self) -> Result<S> {
        self.same_shape(rhs, "mse")?;
        let n = S::from_real(self.numel() as f64);
        let s: S = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(s / n)
    }

    /// Mean absolute difference against a same-shape tensor.
    pub fn mae(&self, rhs: &Self) -> Result<S> {
        self.same_shape(rhs, "mae")?;
        let n = S::from_real(self.numel() as f64);
        let s: S = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        Ok(s / n)
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.shape.len() != 2 || start > end || end > self.shape[0] {
            return Err(Error::Graph(format!(
                "slice_rows {start}..{end} out of range for shape {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        Ok(Self {
            shape: vec![end - start, cols],
            data: self.data[start * cols..end * cols].to_vec(),
        })
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Graph("concat of zero tensors".into()))?;
        let rows = first.rows();
        for p in parts {
            if p.shape.len() != 2 || p.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let total_cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Ok(Self {
            shape: vec![rows, total_cols],
            data,
        })
    }

    /// Reduce a gradient of `self`'s shape onto a broadcast operand's shape.
    pub(crate) fn reduce_to(&self, target_shape: &[usize], kind: Broadcast) -> Self {
        match kind {
            Broadcast::Same => self.clone(),
            Broadcast::Scalar => Self {
                shape: target_shape.to_vec(),
                data: vec![self.sum()],
            },
            Broadcast::Row => {
                let cols = self.cols();
                let mut acc = vec![S::zero(); cols];
                for (i, &v) in self.data.iter().enumerate() {
                    acc[i % cols] += v;
                }
                Self {
                    shape: target_shape.to_vec(),
                    data: acc,
                }
            }
        }
    }
}
