//! The inference-time conditional loss: self-guidance within a window plus
//! stitching across window overlaps. Sum (not mean) reduction throughout;
//! the guidance coefficient absorbs scale.

use crate::dataset::Mask;
use crate::numerics::{cosine_loss_value, pearson_loss_value, NodeId};
use crate::{Error, Graph, Real, Result, Tensor};
use serde::{Deserialize, Serialize};

/// Discrepancy measure on the overlap between consecutive windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchMetric {
    /// Sum of squared differences.
    Mse,
    /// Sum of absolute differences.
    Mae,
    /// One minus the cosine similarity of the flattened overlaps.
    Cosine,
    /// One minus the per-channel Pearson correlation along the time axis,
    /// averaged over channels.
    Pearson,
}

impl std::str::FromStr for StitchMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "mae" => Ok(Self::Mae),
            "cosine" => Ok(Self::Cosine),
            "pearson" => Ok(Self::Pearson),
            other => Err(Error::Config(format!("unknown stitch metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for StitchMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::Mse => "mse",
            Self::Mae => "mae",
            Self::Cosine => "cosine",
            Self::Pearson => "pearson",
        };
        write!(f, "{name}")
    }
}

/// Squared error between the dirty estimate and the observed signal over
/// observed entries only (`mask = 0`), summed.
pub fn self_guidance_loss(x0: &Tensor, x_obs: &Tensor, mask: &Mask) -> Result<Real> {
    if x0.shape() != x_obs.shape() || x0.rows() != mask.rows() || x0.cols() != mask.cols() {
        return Err(Error::ShapeMismatch {
            op: "self_guidance_loss",
            left: x0.shape().to_vec(),
            right: x_obs.shape().to_vec(),
        });
    }
    let mut acc = 0.0;
    for r in 0..x0.rows() {
        for c in 0..x0.cols() {
            if !mask.flag(r, c) {
                let d = x0.get(r, c) - x_obs.get(r, c);
                acc += d * d;
            }
        }
    }
    Ok(acc)
}

/// Discrepancy between a window's leading overlap and its predecessor's
/// trailing overlap, under the chosen metric. Equal shapes; an empty overlap
/// scores 0.
pub fn stitch_loss(curr_prefix: &Tensor, prev_suffix: &Tensor, metric: StitchMetric) -> Result<Real> {
    if curr_prefix.shape() != prev_suffix.shape() {
        return Err(Error::ShapeMismatch {
            op: "stitch_loss",
            left: curr_prefix.shape().to_vec(),
            right: prev_suffix.shape().to_vec(),
        });
    }
    if curr_prefix.numel() == 0 {
        return Ok(0.0);
    }
    match metric {
        StitchMetric::Mse => Ok(curr_prefix
            .data()
            .iter()
            .zip(prev_suffix.data().iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()),
        StitchMetric::Mae => Ok(curr_prefix
            .data()
            .iter()
            .zip(prev_suffix.data().iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum()),
        StitchMetric::Cosine => cosine_loss_value(curr_prefix, prev_suffix),
        StitchMetric::Pearson => pearson_loss_value(curr_prefix, prev_suffix),
    }
}

/// The conditional loss `L_self + L_stitch` at the value level; `prev` is the
/// neighbour's unconditional estimate (full window) with its start offset.
pub fn conditional_loss(
    x0: &Tensor,
    xp: &Tensor,
    x_obs: &Tensor,
    mask: &Mask,
    prev: Option<(&Tensor, usize)>,
    metric: StitchMetric,
) -> Result<Real> {
    let mut total = self_guidance_loss(x0, x_obs, mask)?;
    if let Some((neighbor, offset)) = prev {
        let w = xp.rows();
        if offset < w {
            let curr = xp.slice_rows(0, w - offset)?;
            let target = neighbor.slice_rows(offset, w)?;
            total += stitch_loss(&curr, &target, metric)?;
        }
    }
    Ok(total)
}

/// Gradient-corrected reverse step: `xp - eta * grad`. `eta = 0` returns
/// `xp` unchanged (bit for bit).
pub fn adjust(xp: &Tensor, grad: &Tensor, eta: Real) -> Result<Tensor> {
    if grad.shape() != xp.shape() {
        return Err(Error::ShapeMismatch {
            op: "adjust",
            left: xp.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    if eta == 0.0 {
        return Ok(xp.clone());
    }
    xp.sub(&grad.scale(eta)?)
}

/// Add the self-guidance term to a graph; returns the (scalar) loss node.
pub(crate) fn build_self_term(
    graph: &mut Graph,
    x0_node: NodeId,
    x_obs: &Tensor,
    keep: &Tensor,
) -> Result<NodeId> {
    let neg_obs = graph.constant(x_obs.scale(-1.0)?);
    let diff = graph.add(x0_node, neg_obs)?;
    let keep_node = graph.constant(keep.clone());
    let masked = graph.mul(diff, keep_node)?;
    let sq = graph.mul(masked, masked)?;
    graph.sum(sq)
}

/// Add one stitch term to a graph: rows `rows.0..rows.1` of `xp_node`
/// against a constant target of the same shape.
pub(crate) fn build_stitch_term(
    graph: &mut Graph,
    xp_node: NodeId,
    rows: (usize, usize),
    target: &Tensor,
    metric: StitchMetric,
) -> Result<NodeId> {
    let curr = graph.slice_rows(xp_node, rows.0, rows.1)?;
    match metric {
        StitchMetric::Mse => {
            let neg = graph.constant(target.scale(-1.0)?);
            let diff = graph.add(curr, neg)?;
            let sq = graph.mul(diff, diff)?;
            graph.sum(sq)
        }
        StitchMetric::Mae => {
            let t = graph.constant(target.clone());
            let mean = graph.mae(curr, t)?;
            graph.scale(mean, target.numel() as Real)
        }
        StitchMetric::Cosine => {
            let t = graph.constant(target.clone());
            graph.cosine_loss(curr, t)
        }
        StitchMetric::Pearson => {
            let t = graph.constant(target.clone());
            graph.pearson_loss(curr, t)
        }
    }
}
