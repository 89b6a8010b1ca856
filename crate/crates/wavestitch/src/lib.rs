//! Conditional time-series generation with diffusion models.
//!
//! A trained denoiser predicts the noise added to a window of signal values,
//! conditioned on per-timestep categorical metadata and the diffusion step.
//! At inference, observed signal values are injected without retraining:
//! every denoising step is corrected by the gradient of a conditional loss
//! that ties the sample to the observations within a window (self-guidance)
//! and to its neighbour across window overlaps (stitching). Overlapping
//! windows are denoised in parallel, with coherence propagating through the
//! overlap penalty step by step.
//!
//! The mathematical substrate (tensors, reverse-mode differentiation, the
//! noise schedule, encodings, metrics) is generic over the scalar type via
//! [`Scalar`]; the pipeline itself runs in `f64` through the aliases below,
//! since gradient guidance at inference is precision-sensitive.

pub mod dataset;
pub mod denoiser;
pub mod encoding;
mod error;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type the numeric core is generic over.
///
/// Blanket-implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy cast from `f64`, for constants written in source.
    fn from_real(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant converts to any Scalar")
    }

    /// Lossy cast to `f64`, for reporting.
    fn to_real(self) -> f64;
}

impl Scalar for f32 {
    fn to_real(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_real(self) -> f64 {
        self
    }
}

/// Scalar type used by the pipeline.
pub type Real = f64;

/// Dense tensor over [`Real`].
pub type Tensor = numerics::Tensor<Real>;
/// Compute graph over [`Real`].
pub type Graph = numerics::Graph<Real>;
/// Parameter store over [`Real`].
pub type ParameterStore = numerics::ParameterStore<Real>;
/// Noise schedule over [`Real`].
pub type NoiseSchedule = schedule::NoiseSchedule<Real>;
/// Signal scaler over [`Real`].
pub type SignalScaler = encoding::SignalScaler<Real>;
