//! Evaluation metrics: masked MSE, autocorrelation difference (ACD), and
//! cross-feature correlation difference (x-Corr).

use crate::dataset::Mask;
use crate::numerics::Tensor;
use crate::{Error, Result, Scalar};
use std::io::Write;
use std::path::Path;

/// Which entries the point-wise error covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MseScope {
    /// Entries flagged for generation only (the default for imputation).
    MaskedOnly,
    /// Every entry.
    Full,
}

#[derive(Clone, Copy, Debug)]
pub struct MetricConfig {
    /// Maximum autocorrelation lag `G`, `1 <= G < M`.
    pub max_lag: usize,
    pub scope: MseScope,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            max_lag: 100,
            scope: MseScope::MaskedOnly,
        }
    }
}

/// Mean squared difference over entries flagged for generation.
pub fn masked_mse<S: Scalar>(generated: &Tensor<S>, truth: &Tensor<S>, mask: &Mask) -> Result<S> {
    mse_with_scope(generated, truth, mask, MseScope::MaskedOnly)
}

pub fn mse_with_scope<S: Scalar>(
    generated: &Tensor<S>,
    truth: &Tensor<S>,
    mask: &Mask,
    scope: MseScope,
) -> Result<S> {
    if generated.shape() != truth.shape()
        || generated.rows() != mask.rows()
        || generated.cols() != mask.cols()
    {
        return Err(Error::ShapeMismatch {
            op: "masked_mse",
            left: generated.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let mut acc = S::zero();
    let mut n = 0usize;
    for r in 0..generated.rows() {
        for c in 0..generated.cols() {
            if scope == MseScope::Full || mask.flag(r, c) {
                let d = generated.get(r, c) - truth.get(r, c);
                acc += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(acc / S::from_real(n as f64))
}

/// Sample autocorrelation at `lag`, mean-centered and normalized by the
/// lag-0 autocovariance (the biased estimator: both sums divide by `M`, so
/// the ratio lies in `[-1, 1]`). A zero-variance series yields 0 with a
/// warning.
pub fn acf<S: Scalar>(series: &[S], lag: usize) -> Result<S> {
    let m = series.len();
    if lag >= m {
        return Err(Error::LagOutOfRange { lag, m });
    }
    let n = S::from_real(m as f64);
    let mean = series.iter().copied().sum::<S>() / n;
    let denom: S = series.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if denom == S::zero() {
        log::warn!("acf: zero-variance series, returning 0");
        return Ok(S::zero());
    }
    let mut num = S::zero();
    for i in 0..m - lag {
        num += (series[i] - mean) * (series[i + lag] - mean);
    }
    Ok(num / denom)
}

fn channel<S: Scalar>(t: &Tensor<S>, c: usize) -> Vec<S> {
    (0..t.rows()).map(|r| t.get(r, c)).collect()
}

/// Mean absolute autocorrelation gap over channels and lags `1..=G`.
pub fn acd<S: Scalar>(real: &Tensor<S>, synth: &Tensor<S>, max_lag: usize) -> Result<S> {
    if real.shape() != synth.shape() {
        return Err(Error::ShapeMismatch {
            op: "acd",
            left: real.shape().to_vec(),
            right: synth.shape().to_vec(),
        });
    }
    let m = real.rows();
    if max_lag == 0 || max_lag >= m {
        return Err(Error::LagOutOfRange { lag: max_lag, m });
    }
    let channels = real.cols();
    let mut acc = S::zero();
    for c in 0..channels {
        let rc = channel(real, c);
        let sc = channel(synth, c);
        for lag in 1..=max_lag {
            acc += (acf(&rc, lag)? - acf(&sc, lag)?).abs();
        }
    }
    Ok(acc / S::from_real((channels * max_lag) as f64))
}

/// Pearson correlation of two equal-length series; 0 (with a warning) when
/// either side is constant.
pub fn pearson<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = S::from_real(a.len() as f64);
    let ma = a.iter().copied().sum::<S>() / n;
    let mb = b.iter().copied().sum::<S>() / n;
    let mut num = S::zero();
    let mut da = S::zero();
    let mut db = S::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == S::zero() || db == S::zero() {
        log::warn!("pearson: constant channel, correlation treated as 0");
        return S::zero();
    }
    num / (da.sqrt() * db.sqrt())
}

/// Mean absolute gap between the real and synthetic pairwise channel
/// correlations, over the `C * (C - 1) / 2` unordered pairs.
pub fn xcorr_diff<S: Scalar>(real: &Tensor<S>, synth: &Tensor<S>) -> Result<S> {
    if real.shape() != synth.shape() {
        return Err(Error::ShapeMismatch {
            op: "xcorr_diff",
            left: real.shape().to_vec(),
            right: synth.shape().to_vec(),
        });
    }
    let channels = real.cols();
    if channels < 2 {
        return Err(Error::TooFewChannels(channels));
    }
    let real_cols: Vec<Vec<S>> = (0..channels).map(|c| channel(real, c)).collect();
    let synth_cols: Vec<Vec<S>> = (0..channels).map(|c| channel(synth, c)).collect();
    let mut acc = S::zero();
    let mut pairs = 0usize;
    for i in 0..channels {
        for j in i + 1..channels {
            let cr = pearson(&real_cols[i], &real_cols[j]);
            let cs = pearson(&synth_cols[i], &synth_cols[j]);
            acc += (cr - cs).abs();
            pairs += 1;
        }
    }
    Ok(acc / S::from_real(pairs as f64))
}

/// Write `key = value` lines in the given order.
pub fn write_metrics_file(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (k, v) in entries {
        writeln!(f, "{k} = {v}")?;
    }
    Ok(())
}
