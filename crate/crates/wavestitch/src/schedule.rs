//! Diffusion noise schedule and the forward (noising) processes.

use crate::numerics::Tensor;
use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

/// How `alpha_t` is interpolated between its endpoints. Linear interpolation
/// of `alpha` and of `1 - alpha` over the same endpoints produce the same
/// schedule; both spellings are kept so configs can say what they mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearAlpha,
    LinearBeta,
}

/// Whether the reverse-step noise multiplier is the sigma expression itself
/// (as written) or its square root (the common DDPM convention).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaConvention {
    Paper,
    Sqrt,
}

/// Serializable recipe for a [`NoiseSchedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub alpha_first: f64,
    pub alpha_last: f64,
    pub sigma_convention: SigmaConvention,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearAlpha,
            steps: 200,
            alpha_first: 0.9999,
            alpha_last: 0.98,
            sigma_convention: SigmaConvention::Paper,
        }
    }
}

impl ScheduleSpec {
    pub fn build<S: Scalar>(&self) -> Result<NoiseSchedule<S>> {
        NoiseSchedule::linear(
            self.steps,
            self.alpha_first,
            self.alpha_last,
            self.kind,
            self.sigma_convention,
        )
    }
}

/// Per-step diffusion coefficients for `t = 1..=T`.
///
/// `sigma_t = (1 - alpha_t) * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`,
/// which is 0 at `t = 1` (the final reverse step is deterministic).
#[derive(Clone, Debug)]
pub struct NoiseSchedule<S> {
    alpha: Vec<S>,
    alpha_bar: Vec<S>,
    sigma: Vec<S>,
    convention: SigmaConvention,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Interpolate `alpha_t` between `alpha_first` at `t = 1` and
    /// `alpha_last` at `t = T`.
    pub fn linear(
        steps: usize,
        alpha_first: f64,
        alpha_last: f64,
        kind: ScheduleKind,
        convention: SigmaConvention,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::StepOutOfRange { t: 0, max: 0 });
        }
        if !(alpha_last > 0.0 && alpha_last <= alpha_first && alpha_first < 1.0) {
            return Err(Error::BadScheduleEndpoints {
                first: alpha_first,
                last: alpha_last,
            });
        }
        let alpha: Vec<S> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    i as f64 / (steps - 1) as f64
                };
                let a = match kind {
                    ScheduleKind::LinearAlpha => alpha_first + frac * (alpha_last - alpha_first),
                    ScheduleKind::LinearBeta => {
                        let beta = (1.0 - alpha_first) + frac * ((1.0 - alpha_last) - (1.0 - alpha_first));
                        1.0 - beta
                    }
                };
                S::from_real(a)
            })
            .collect();

        let mut alpha_bar = Vec::with_capacity(steps);
        let mut running = S::one();
        for &a in &alpha {
            running = running * a;
            alpha_bar.push(running);
        }

        let mut sigma = Vec::with_capacity(steps);
        for t in 1..=steps {
            let a_t = alpha[t - 1];
            let bar_t = alpha_bar[t - 1];
            let bar_prev = if t == 1 { S::one() } else { alpha_bar[t - 2] };
            sigma.push((S::one() - a_t) * (S::one() - bar_prev) / (S::one() - bar_t));
        }

        Ok(Self {
            alpha,
            alpha_bar,
            sigma,
            convention,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn convention(&self) -> SigmaConvention {
        self.convention
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.steps() {
            Ok(())
        } else {
            Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            })
        }
    }

    /// `alpha_t`, 1-based.
    pub fn alpha(&self, t: usize) -> S {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, 1-based; the empty product `alpha_bar_0` is 1.
    pub fn alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// The sigma expression at `t` (not yet convention-adjusted).
    pub fn sigma(&self, t: usize) -> S {
        self.sigma[t - 1]
    }

    /// The multiplier applied to the reverse-step noise draw `z`.
    pub fn noise_multiplier(&self, t: usize) -> S {
        match self.convention {
            SigmaConvention::Paper => self.sigma(t),
            SigmaConvention::Sqrt => self.sigma(t).sqrt(),
        }
    }

    /// Signal-to-noise ratio `alpha_bar_t / (1 - alpha_bar_t)`.
    pub fn snr(&self, t: usize) -> S {
        let b = self.alpha_bar(t);
        b / (S::one() - b)
    }

    /// One forward noising step:
    /// `sqrt(alpha_t) * x_prev + sqrt(1 - alpha_t) * eps`.
    pub fn forward_noise_step(
        &self,
        x_prev: &Tensor<S>,
        t: usize,
        eps: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        self.check_step(t)?;
        if x_prev.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "forward_noise_step",
                left: x_prev.shape().to_vec(),
                right: eps.shape().to_vec(),
            });
        }
        let a = self.alpha(t);
        x_prev
            .scale(a.sqrt())?
            .add(&eps.scale((S::one() - a).sqrt())?)
    }

    /// Noise straight to step `t`:
    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    /// `t = 0` returns `x0` unchanged.
    pub fn forward_noise_to(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        if t == 0 {
            return Ok(x0.clone());
        }
        self.check_step(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "forward_noise_to",
                left: x0.shape().to_vec(),
                right: eps.shape().to_vec(),
            });
        }
        let bar = self.alpha_bar(t);
        x0.scale(bar.sqrt())?
            .add(&eps.scale((S::one() - bar).sqrt())?)
    }
}
