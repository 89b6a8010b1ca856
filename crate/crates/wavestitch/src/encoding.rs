//! Deterministic preprocessing: cyclic encoding of categorical metadata and
//! per-channel signal standardization.

use crate::numerics::Tensor;
use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Map category `k` of a `cardinality`-valued feature to a point on the unit
/// circle at angle `2*pi*k / cardinality`.
pub fn cyclic_encode<S: Scalar>(k: usize, cardinality: usize) -> Result<(S, S)> {
    if cardinality == 0 || k >= cardinality {
        return Err(Error::CategoryOutOfRange {
            index: k,
            cardinality,
        });
    }
    let theta = 2.0 * PI * (k as f64) / (cardinality as f64);
    let theta = S::from_real(theta);
    Ok((theta.sin(), theta.cos()))
}

/// Category dictionary for one metadata column. The index of a category is
/// its position in `categories`; columns whose values all parse as numbers
/// are ordered numerically so that calendar-like features keep their cyclic
/// adjacency, everything else is ordered lexicographically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnCodec {
    pub name: String,
    pub categories: Vec<String>,
}

impl ColumnCodec {
    pub fn cardinality(&self) -> usize {
        self.categories.len()
    }

    pub fn index_of(&self, value: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == value)
            .ok_or_else(|| Error::UnseenCategory {
                column: self.name.clone(),
                value: value.to_string(),
            })
    }
}

/// Per-column category dictionaries for all metadata columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataCodec {
    pub columns: Vec<ColumnCodec>,
}

impl MetadataCodec {
    /// Collect the distinct categories of each column.
    pub fn fit(column_names: &[String], rows: &[Vec<String>]) -> Self {
        let columns = column_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let mut cats: Vec<String> = Vec::new();
                for row in rows {
                    if !cats.contains(&row[c]) {
                        cats.push(row[c].clone());
                    }
                }
                let all_numeric = cats.iter().all(|v| v.parse::<f64>().is_ok());
                if all_numeric {
                    cats.sort_by(|a, b| {
                        let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
                        x.partial_cmp(&y).unwrap().then_with(|| a.cmp(b))
                    });
                } else {
                    cats.sort();
                }
                ColumnCodec {
                    name: name.clone(),
                    categories: cats,
                }
            })
            .collect();
        Self { columns }
    }

    /// Number of metadata columns.
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Width of an encoded row: one (sin, cos) pair per column.
    pub fn encoded_width(&self) -> usize {
        2 * self.columns.len()
    }

    /// Encode a metadata table into an `M x 2L` matrix, `(sin, cos)` pairs in
    /// column order.
    pub fn encode_rows<S: Scalar>(&self, rows: &[Vec<String>]) -> Result<Tensor<S>> {
        let width = self.encoded_width();
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            for (c, codec) in self.columns.iter().enumerate() {
                let k = codec.index_of(&row[c])?;
                let (s, co) = cyclic_encode::<S>(k, codec.cardinality())?;
                data.push(s);
                data.push(co);
            }
        }
        Tensor::new(vec![rows.len(), width], data)
    }
}

/// Per-channel standardization statistics, fit on the training split only.
/// Constant channels get a unit standard deviation so the transform only
/// recenters them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalScaler<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

impl<S: Scalar> SignalScaler<S> {
    pub fn fit(signals: &Tensor<S>) -> Result<Self> {
        let (rows, cols) = (signals.rows(), signals.cols());
        if rows == 0 || signals.numel() == 0 {
            return Err(Error::EmptyTrainingSplit);
        }
        let n = S::from_real(rows as f64);
        let mut mean = vec![S::zero(); cols];
        let mut std = vec![S::zero(); cols];
        for c in 0..cols {
            let mut acc = S::zero();
            for r in 0..rows {
                acc += signals.get(r, c);
            }
            mean[c] = acc / n;
            let mut var = S::zero();
            for r in 0..rows {
                let d = signals.get(r, c) - mean[c];
                var += d * d;
            }
            let sd = (var / n).sqrt();
            std[c] = if sd > S::zero() { sd } else { S::one() };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, signals: &Tensor<S>) -> Result<Tensor<S>> {
        self.transform(signals, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, signals: &Tensor<S>) -> Result<Tensor<S>> {
        self.transform(signals, |v, m, s| v * s + m)
    }

    fn transform(
        &self,
        signals: &Tensor<S>,
        f: impl Fn(S, S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (rows, cols) = (signals.rows(), signals.cols());
        if cols != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "scaler",
                left: vec![rows, cols],
                right: vec![self.mean.len()],
            });
        }
        let mut data = Vec::with_capacity(signals.numel());
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(signals.get(r, c), self.mean[c], self.std[c]));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }
}
