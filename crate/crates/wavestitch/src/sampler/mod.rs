//! Inference-time generation strategies.
//!
//! All modes share the same trained denoiser and noise substreams. The
//! pipelined-parallel sampler denoises every window concurrently at each
//! diffusion step, correcting each window by the gradient of its conditional
//! loss; neighbour windows are read from a frozen snapshot of the same
//! step's pre-adjustment unconditional estimates, so results are independent
//! of scheduling order and worker count. The autoregressive variant
//! finalizes windows one at a time, each conditioned on its predecessor.
//! The RePaint variant re-noises observed regions each step and overwrites
//! overlaps instead of using gradients.

mod losses;

pub use losses::{adjust, conditional_loss, self_guidance_loss, stitch_loss, StitchMetric};

use crate::dataset::{Mask, WindowSet};
use crate::denoiser::{build_pool, Denoiser};
use crate::numerics::NodeId;
use crate::rng::{NoiseStreams, StreamKind};
use crate::{Error, Graph, NoiseSchedule, Real, Result, Tensor};
use losses::{build_self_term, build_stitch_term};
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// Pipelined-parallel denoising with self-guidance and stitching.
    Parallel,
    /// Window-by-window generation, each conditioned on the previous one.
    Autoregressive,
    /// Re-noise observed regions each step, overwrite overlaps; no gradients.
    Repaint,
    /// Parallel with the stitch term removed.
    SelfOnly,
    /// No inference-time conditioning at all (metadata only).
    MetadataOnly,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "autoregressive" | "ar" => Ok(Self::Autoregressive),
            "repaint" => Ok(Self::Repaint),
            "self_only" | "self-only" => Ok(Self::SelfOnly),
            "metadata_only" | "metadata-only" => Ok(Self::MetadataOnly),
            other => Err(Error::Config(format!("unknown sampler mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::Parallel => "parallel",
            Self::Autoregressive => "autoregressive",
            Self::Repaint => "repaint",
            Self::SelfOnly => "self_only",
            Self::MetadataOnly => "metadata_only",
        };
        write!(f, "{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    /// Backpropagate through the denoiser.
    Exact,
    /// Skip the network's input-Jacobian: `d x0 / d x_t ~ 1/sqrt(abar_t)`,
    /// `d xp / d x_t ~ 1/sqrt(alpha_t)`.
    JacobianFree,
}

impl std::str::FromStr for GradientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "jacobian_free" | "jacobian-free" | "jf" => Ok(Self::JacobianFree),
            other => Err(Error::Config(format!("unknown gradient mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    /// Guidance coefficient scaling the conditional-loss gradient.
    pub eta: Real,
    /// Mini-batch size `b` for the batched-call accounting and fan-out.
    pub batch: usize,
    pub mode: SamplerMode,
    pub stitch_metric: StitchMetric,
    pub gradient_mode: GradientMode,
    /// Also penalize the mirrored (next-window) overlap term.
    pub symmetric_stitch: bool,
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            batch: 1024,
            mode: SamplerMode::Parallel,
            stitch_metric: StitchMetric::Mse,
            gradient_mode: GradientMode::Exact,
            symmetric_stitch: false,
            seed: 0,
            workers: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::Config(format!(
                "guidance coefficient must be finite and >= 0, got {}",
                self.eta
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("mini-batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step means across windows, recorded after the step's adjustment.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRow {
    /// Diffusion step `t` (descending during a run).
    pub step: usize,
    pub mean_self_loss: Real,
    pub mean_stitch_loss: Real,
    /// Mean squared disagreement between consecutive windows' current
    /// states on their shared timesteps.
    pub mean_overlap_gap: Real,
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    /// Full sequence `M x C` in standardized units, observed entries
    /// reinstated bit for bit.
    pub sequence: Tensor,
    /// Batched denoiser calls (parallel family) or single-window calls
    /// (autoregressive).
    pub denoiser_calls: u64,
    pub wall_seconds: f64,
    pub trace: Vec<TraceRow>,
}

/// One-shot inversion of the closed-form noising:
/// `(x_t - sqrt(1 - abar_t) * f(a, x_t, t)) / sqrt(abar_t)`.
pub fn dirty_estimate(
    model: &Denoiser,
    sched: &NoiseSchedule,
    metadata: &Tensor,
    x_hat_t: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let eps_hat = model.forward(metadata, x_hat_t, t)?;
    dirty_estimate_from_eps(x_hat_t, &eps_hat, t, sched)
}

/// One unconditional reverse step:
/// `(x_t - (1 - alpha_t)/sqrt(1 - abar_t) * f(a, x_t, t)) / sqrt(alpha_t)
///  + sigma_t * z`.
pub fn uncond_step(
    model: &Denoiser,
    sched: &NoiseSchedule,
    metadata: &Tensor,
    x_hat_t: &Tensor,
    t: usize,
    z: &Tensor,
) -> Result<Tensor> {
    let eps_hat = model.forward(metadata, x_hat_t, t)?;
    uncond_step_from_eps(x_hat_t, &eps_hat, t, z, sched)
}

struct StepCoeffs {
    inv_sqrt_bar: Real,
    neg_sqrt_one_minus_bar: Real,
    inv_sqrt_alpha: Real,
    neg_eps_factor: Real,
    noise_mult: Real,
}

fn coeffs(sched: &NoiseSchedule, t: usize) -> StepCoeffs {
    let alpha = sched.alpha(t);
    let bar = sched.alpha_bar(t);
    StepCoeffs {
        inv_sqrt_bar: 1.0 / bar.sqrt(),
        neg_sqrt_one_minus_bar: -(1.0 - bar).sqrt(),
        inv_sqrt_alpha: 1.0 / alpha.sqrt(),
        neg_eps_factor: -((1.0 - alpha) / (1.0 - bar).sqrt()),
        noise_mult: sched.noise_multiplier(t),
    }
}

pub(crate) fn dirty_estimate_from_eps(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let c = coeffs(sched, t);
    x_t.add(&eps_hat.scale(c.neg_sqrt_one_minus_bar)?)?
        .scale(c.inv_sqrt_bar)
}

pub(crate) fn uncond_step_from_eps(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let c = coeffs(sched, t);
    x_t.add(&eps_hat.scale(c.neg_eps_factor)?)?
        .scale(c.inv_sqrt_alpha)?
        .add(&z.scale(c.noise_mult)?)
}

/// Immutable per-window inputs for one generation run.
#[derive(Clone)]
struct WindowCtx {
    x_obs: Tensor,
    keep: Tensor,
    mask: Mask,
    a_enc: Tensor,
    /// Start-offset to the previous window (0 for the first).
    prev_offset: usize,
    /// Shared rows with the previous window.
    prev_overlap: usize,
    prev_exists: bool,
    /// Start-offset of the next window relative to this one (0 for the last).
    next_offset: usize,
    next_overlap: usize,
    next_exists: bool,
}

fn build_ctxs(windows: &WindowSet) -> Vec<WindowCtx> {
    let j_count = windows.count();
    let w = windows.width;
    (0..j_count)
        .map(|j| {
            let prev_offset = windows.offset_from_prev(j);
            let next_offset = if j + 1 < j_count {
                windows.offset_from_prev(j + 1)
            } else {
                0
            };
            WindowCtx {
                x_obs: windows.signals[j].clone(),
                keep: windows.masks[j].keep_tensor(),
                mask: windows.masks[j].clone(),
                a_enc: windows.metadata[j].clone(),
                prev_offset,
                prev_overlap: if j == 0 { 0 } else { w - prev_offset },
                prev_exists: j > 0,
                next_offset,
                next_overlap: if j + 1 < j_count { w - next_offset } else { 0 },
                next_exists: j + 1 < j_count,
            }
        })
        .collect()
}

/// Outcome of one window's denoiser evaluation at one step.
enum StepEval {
    WithGraph {
        graph: Graph,
        x_node: NodeId,
        x0_node: NodeId,
        xp_node: NodeId,
        x0: Tensor,
        xp: Tensor,
    },
    Values {
        x0: Tensor,
        xp: Tensor,
    },
}

impl StepEval {
    fn x0(&self) -> &Tensor {
        match self {
            StepEval::WithGraph { x0, .. } => x0,
            StepEval::Values { x0, .. } => x0,
        }
    }

    fn xp(&self) -> &Tensor {
        match self {
            StepEval::WithGraph { xp, .. } => xp,
            StepEval::Values { xp, .. } => xp,
        }
    }
}

/// One denoiser evaluation with the dirty estimate and unconditional step
/// composed on the graph, gradients w.r.t. the window retained.
fn build_step_graph(
    model: &Denoiser,
    sched: &NoiseSchedule,
    ctx: &WindowCtx,
    state: &Tensor,
    t: usize,
    z: &Tensor,
) -> Result<StepEval> {
    let c = coeffs(sched, t);
    let mut graph = Graph::new();
    let x_node = graph.input(state.clone());
    let eps = model
        .forward_graph(&mut graph, &ctx.a_enc, x_node, t, false)?
        .eps_hat;
    let e1 = graph.scale(eps, c.neg_sqrt_one_minus_bar)?;
    let s1 = graph.add(x_node, e1)?;
    let x0_node = graph.scale(s1, c.inv_sqrt_bar)?;
    let e2 = graph.scale(eps, c.neg_eps_factor)?;
    let s2 = graph.add(x_node, e2)?;
    let s3 = graph.scale(s2, c.inv_sqrt_alpha)?;
    let xp_node = graph.add_const(s3, z.scale(c.noise_mult)?)?;
    let x0 = graph.value(x0_node)?.clone();
    let xp = graph.value(xp_node)?.clone();
    Ok(StepEval::WithGraph {
        graph,
        x_node,
        x0_node,
        xp_node,
        x0,
        xp,
    })
}

fn value_step(
    model: &Denoiser,
    sched: &NoiseSchedule,
    ctx: &WindowCtx,
    state: &Tensor,
    t: usize,
    z: &Tensor,
) -> Result<StepEval> {
    let eps = model.forward(&ctx.a_enc, state, t)?;
    Ok(StepEval::Values {
        x0: dirty_estimate_from_eps(state, &eps, t, sched)?,
        xp: uncond_step_from_eps(state, &eps, t, z, sched)?,
    })
}

/// Stitch targets for one window at one step; full neighbour windows, read
/// from the frozen snapshot (parallel) or the finalized sequence (AR).
struct StitchTargets<'a> {
    prev: Option<&'a Tensor>,
    next: Option<&'a Tensor>,
}

struct GuidedUpdate {
    state: Tensor,
    self_loss: Real,
    stitch_loss: Real,
}

/// Build the conditional loss on top of a step graph (or a detached small
/// graph in jacobian-free mode), backpropagate to the window, and apply the
/// scaled correction.
#[allow(clippy::too_many_arguments)]
fn guided_update(
    eval: StepEval,
    ctx: &WindowCtx,
    targets: StitchTargets<'_>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    t: usize,
    window: usize,
    use_stitch: bool,
) -> Result<GuidedUpdate> {
    let w = ctx.x_obs.rows();
    let numeric = |e: Error| {
        if e.is_numerical() {
            Error::NonFiniteGradient { t, window }
        } else {
            e
        }
    };

    // Diagnostic stitch value (recorded even when the term is not used).
    let stitch_diag = match targets.prev {
        Some(prev) if ctx.prev_overlap > 0 => {
            let curr = eval.xp().slice_rows(0, ctx.prev_overlap)?;
            let target = prev.slice_rows(ctx.prev_offset, w)?;
            stitch_loss(&curr, &target, cfg.stitch_metric)?
        }
        _ => 0.0,
    };

    let build_loss = |graph: &mut Graph, x0_node: NodeId, xp_node: NodeId| -> Result<(NodeId, Real)> {
        let lself = build_self_term(graph, x0_node, &ctx.x_obs, &ctx.keep)?;
        let self_value = graph
            .value(lself)?
            .scalar_value()
            .expect("self term is scalar");
        let mut total = lself;
        if use_stitch {
            if let Some(prev) = targets.prev {
                if ctx.prev_overlap > 0 {
                    let target = prev.slice_rows(ctx.prev_offset, w)?;
                    let term = build_stitch_term(
                        graph,
                        xp_node,
                        (0, ctx.prev_overlap),
                        &target,
                        cfg.stitch_metric,
                    )?;
                    total = graph.add(total, term)?;
                }
            }
            if cfg.symmetric_stitch {
                if let Some(next) = targets.next {
                    if ctx.next_overlap > 0 {
                        let target = next.slice_rows(0, ctx.next_overlap)?;
                        let term = build_stitch_term(
                            graph,
                            xp_node,
                            (ctx.next_offset, w),
                            &target,
                            cfg.stitch_metric,
                        )?;
                        total = graph.add(total, term)?;
                    }
                }
            }
        }
        Ok((total, self_value))
    };

    match eval {
        StepEval::WithGraph {
            mut graph,
            x_node,
            x0_node,
            xp_node,
            xp,
            ..
        } => {
            let (_, self_value) = build_loss(&mut graph, x0_node, xp_node).map_err(numeric)?;
            let grads = graph.backward(&[x_node]).map_err(numeric)?;
            let state = adjust(&xp, &grads[&x_node], cfg.eta).map_err(numeric)?;
            Ok(GuidedUpdate {
                state,
                self_loss: self_value,
                stitch_loss: stitch_diag,
            })
        }
        StepEval::Values { x0, xp } => {
            let c = coeffs(sched, t);
            let mut graph = Graph::new();
            let x0_node = graph.input(x0);
            let xp_node = graph.input(xp.clone());
            let (_, self_value) = build_loss(&mut graph, x0_node, xp_node).map_err(numeric)?;
            let grads = graph.backward(&[x0_node, xp_node]).map_err(numeric)?;
            let grad = grads[&x0_node]
                .scale(c.inv_sqrt_bar)?
                .add(&grads[&xp_node].scale(c.inv_sqrt_alpha)?)?;
            let state = adjust(&xp, &grad, cfg.eta).map_err(numeric)?;
            Ok(GuidedUpdate {
                state,
                self_loss: self_value,
                stitch_loss: stitch_diag,
            })
        }
    }
}

/// Observed entries win, everything else comes from the generated state.
fn reintroduce(mask: &Mask, x_obs: &Tensor, state: &Tensor) -> Tensor {
    let mut out = state.clone();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            if !mask.flag(r, c) {
                out.set(r, c, x_obs.get(r, c));
            }
        }
    }
    out
}

/// Mean squared disagreement between consecutive windows on shared rows.
fn overlap_gap(states: &[Tensor], ctxs: &[WindowCtx]) -> Real {
    let mut acc = 0.0;
    let mut n = 0usize;
    for j in 1..states.len() {
        let overlap = ctxs[j].prev_overlap;
        if overlap == 0 {
            continue;
        }
        let offset = ctxs[j].prev_offset;
        let cols = states[j].cols();
        for r in 0..overlap {
            for c in 0..cols {
                let d = states[j].get(r, c) - states[j - 1].get(r + offset, c);
                acc += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as Real
    }
}

fn check_model_windows(model: &Denoiser, windows: &WindowSet) -> Result<()> {
    let cfg = model.config();
    if windows.count() == 0 {
        return Err(Error::Window("no windows to generate".into()));
    }
    if cfg.window != windows.width {
        return Err(Error::ShapeMismatch {
            op: "generate(window)",
            left: vec![cfg.window],
            right: vec![windows.width],
        });
    }
    if windows.signals[0].cols() != cfg.channels {
        return Err(Error::ShapeMismatch {
            op: "generate(channels)",
            left: vec![cfg.channels],
            right: vec![windows.signals[0].cols()],
        });
    }
    if windows.metadata[0].cols() != cfg.metadata_width {
        return Err(Error::ShapeMismatch {
            op: "generate(metadata)",
            left: vec![cfg.metadata_width],
            right: vec![windows.metadata[0].cols()],
        });
    }
    Ok(())
}

/// Run the configured sampler over a window set.
pub fn generate(
    model: &Denoiser,
    sched: &NoiseSchedule,
    windows: &WindowSet,
    cfg: &SamplerConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    check_model_windows(model, windows)?;
    match cfg.mode {
        SamplerMode::Autoregressive => run_autoregressive(model, sched, windows, cfg),
        _ => run_parallel_family(model, sched, windows, cfg),
    }
}

fn run_parallel_family(
    model: &Denoiser,
    sched: &NoiseSchedule,
    windows: &WindowSet,
    cfg: &SamplerConfig,
) -> Result<GenerationResult> {
    let start_time = Instant::now();
    let ctxs = build_ctxs(windows);
    let streams = NoiseStreams::new(cfg.seed);
    let pool = build_pool(cfg.workers)?;
    let j_count = windows.count();
    let w = windows.width;
    let chans = windows.signals[0].cols();
    let t_steps = sched.steps();
    let needs_graph = matches!(cfg.mode, SamplerMode::Parallel | SamplerMode::SelfOnly)
        && cfg.gradient_mode == GradientMode::Exact;

    let mut states: Vec<Tensor> = (0..j_count)
        .map(|j| streams.normal_tensor(StreamKind::Init, j as u64, 0, &[w, chans]))
        .collect();
    let mut calls: u64 = 0;
    let mut trace = Vec::with_capacity(t_steps);
    let indices: Vec<usize> = (0..j_count).collect();

    for t in (1..=t_steps).rev() {
        // Phase A: one batched denoiser call per mini-batch.
        let mut evals: Vec<StepEval> = Vec::with_capacity(j_count);
        for chunk in indices.chunks(cfg.batch) {
            calls += 1;
            let chunk_evals: Vec<Result<StepEval>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&j| {
                        let z =
                            streams.normal_tensor(StreamKind::StepNoise, j as u64, t as u64, &[w, chans]);
                        if needs_graph {
                            build_step_graph(model, sched, &ctxs[j], &states[j], t, &z)
                        } else {
                            value_step(model, sched, &ctxs[j], &states[j], t, &z)
                        }
                    })
                    .collect()
            });
            for e in chunk_evals {
                evals.push(e?);
            }
        }
        // Frozen snapshot of the pre-adjustment unconditional estimates.
        let xp_snapshot: Vec<Tensor> = evals.iter().map(|e| e.xp().clone()).collect();

        // Phase B: per-window conditioning against the snapshot.
        let updates: Vec<Result<GuidedUpdate>> = pool.install(|| {
            evals
                .into_par_iter()
                .enumerate()
                .map(|(j, eval)| match cfg.mode {
                    SamplerMode::Parallel | SamplerMode::SelfOnly => {
                        let targets = StitchTargets {
                            prev: ctxs[j].prev_exists.then(|| &xp_snapshot[j - 1]),
                            next: ctxs[j].next_exists.then(|| &xp_snapshot[j + 1]),
                        };
                        let use_stitch = cfg.mode == SamplerMode::Parallel;
                        guided_update(eval, &ctxs[j], targets, cfg, sched, t, j, use_stitch)
                    }
                    SamplerMode::MetadataOnly => {
                        let self_loss = self_guidance_loss(eval.x0(), &ctxs[j].x_obs, &ctxs[j].mask)?;
                        let stitch = diag_stitch(&xp_snapshot, &ctxs[j], j, eval.xp(), cfg)?;
                        Ok(GuidedUpdate {
                            state: eval.xp().clone(),
                            self_loss,
                            stitch_loss: stitch,
                        })
                    }
                    SamplerMode::Repaint => {
                        let self_loss = self_guidance_loss(eval.x0(), &ctxs[j].x_obs, &ctxs[j].mask)?;
                        let stitch = diag_stitch(&xp_snapshot, &ctxs[j], j, eval.xp(), cfg)?;
                        let noised = if t == 1 {
                            ctxs[j].x_obs.clone()
                        } else {
                            let eps = streams.normal_tensor(
                                StreamKind::RepaintNoise,
                                j as u64,
                                t as u64,
                                &[w, chans],
                            );
                            sched.forward_noise_to(&ctxs[j].x_obs, t - 1, &eps)?
                        };
                        Ok(GuidedUpdate {
                            state: reintroduce(&ctxs[j].mask, &noised, eval.xp()),
                            self_loss,
                            stitch_loss: stitch,
                        })
                    }
                    SamplerMode::Autoregressive => unreachable!("handled by run_autoregressive"),
                })
                .collect()
        });
        let mut self_sum = 0.0;
        let mut stitch_sum = 0.0;
        let mut new_states = Vec::with_capacity(j_count);
        for u in updates {
            let u = u?;
            self_sum += u.self_loss;
            stitch_sum += u.stitch_loss;
            new_states.push(u.state);
        }

        // RePaint aligns overlaps by overwriting from the predecessor, as a
        // roll over this step's frozen results.
        if cfg.mode == SamplerMode::Repaint {
            let snapshot = new_states.clone();
            for j in 1..j_count {
                let overlap = ctxs[j].prev_overlap;
                let offset = ctxs[j].prev_offset;
                for r in 0..overlap {
                    for c in 0..chans {
                        new_states[j].set(r, c, snapshot[j - 1].get(r + offset, c));
                    }
                }
            }
        }
        states = new_states;
        trace.push(TraceRow {
            step: t,
            mean_self_loss: self_sum / j_count as Real,
            mean_stitch_loss: stitch_sum / j_count as Real,
            mean_overlap_gap: overlap_gap(&states, &ctxs),
        });
    }

    let finals: Vec<Tensor> = states
        .iter()
        .zip(ctxs.iter())
        .map(|(s, ctx)| reintroduce(&ctx.mask, &ctx.x_obs, s))
        .collect();
    let sequence = windows.merge(&finals)?;
    Ok(GenerationResult {
        sequence,
        denoiser_calls: calls,
        wall_seconds: start_time.elapsed().as_secs_f64(),
        trace,
    })
}

/// Diagnostic stitch value against the snapshot neighbour.
fn diag_stitch(
    snapshot: &[Tensor],
    ctx: &WindowCtx,
    j: usize,
    xp: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Real> {
    if !ctx.prev_exists || ctx.prev_overlap == 0 {
        return Ok(0.0);
    }
    let w = xp.rows();
    let curr = xp.slice_rows(0, ctx.prev_overlap)?;
    let target = snapshot[j - 1].slice_rows(ctx.prev_offset, w)?;
    stitch_loss(&curr, &target, cfg.stitch_metric)
}

fn run_autoregressive(
    model: &Denoiser,
    sched: &NoiseSchedule,
    windows: &WindowSet,
    cfg: &SamplerConfig,
) -> Result<GenerationResult> {
    let start_time = Instant::now();
    let ctxs = build_ctxs(windows);
    let streams = NoiseStreams::new(cfg.seed);
    let j_count = windows.count();
    let w = windows.width;
    let chans = windows.signals[0].cols();
    let t_steps = sched.steps();

    let mut calls: u64 = 0;
    let mut finals: Vec<Tensor> = Vec::with_capacity(j_count);
    let mut self_sums = vec![0.0; t_steps + 1];
    let mut stitch_sums = vec![0.0; t_steps + 1];

    for j in 0..j_count {
        // The previously generated window is fixed context: its trailing
        // rows become observed values for this window's self-guidance, and
        // the stitch target is the finalized window itself.
        let base = &ctxs[j];
        let mut ctx = base.clone();
        if let Some(prev_final) = finals.last() {
            for r in 0..base.prev_overlap {
                for c in 0..chans {
                    ctx.keep.set(r, c, 1.0);
                    ctx.x_obs.set(r, c, prev_final.get(r + base.prev_offset, c));
                    ctx.mask.set(r, c, false);
                }
            }
        }

        let mut state = streams.normal_tensor(StreamKind::Init, j as u64, 0, &[w, chans]);
        for t in (1..=t_steps).rev() {
            let z = streams.normal_tensor(StreamKind::StepNoise, j as u64, t as u64, &[w, chans]);
            calls += 1;
            let eval = if cfg.gradient_mode == GradientMode::Exact {
                build_step_graph(model, sched, &ctx, &state, t, &z)?
            } else {
                value_step(model, sched, &ctx, &state, t, &z)?
            };
            let targets = StitchTargets {
                prev: finals.last(),
                next: None,
            };
            let update = guided_update(eval, &ctx, targets, cfg, sched, t, j, true)?;
            state = update.state;
            self_sums[t] += update.self_loss;
            stitch_sums[t] += update.stitch_loss;
        }
        // Reintroduce against the original observations and mask.
        finals.push(reintroduce(&base.mask, &base.x_obs, &state));
    }

    let sequence = windows.merge(&finals)?;
    let trace = (1..=t_steps)
        .rev()
        .map(|t| TraceRow {
            step: t,
            mean_self_loss: self_sums[t] / j_count as Real,
            mean_stitch_loss: stitch_sums[t] / j_count as Real,
            mean_overlap_gap: 0.0,
        })
        .collect();
    Ok(GenerationResult {
        sequence,
        denoiser_calls: calls,
        wall_seconds: start_time.elapsed().as_secs_f64(),
        trace,
    })
}

#[derive(Serialize)]
struct Summary {
    denoiser_calls: u64,
    wall_seconds: f64,
    final_self_loss: Real,
    final_stitch_loss: Real,
    final_overlap_gap: Real,
}

/// Flat JSON summary of a run (calls, seconds, final losses).
pub fn write_summary(path: &Path, result: &GenerationResult) -> Result<()> {
    let last = result.trace.last();
    let summary = Summary {
        denoiser_calls: result.denoiser_calls,
        wall_seconds: result.wall_seconds,
        final_self_loss: last.map_or(0.0, |r| r.mean_self_loss),
        final_stitch_loss: last.map_or(0.0, |r| r.mean_stitch_loss),
        final_overlap_gap: last.map_or(0.0, |r| r.mean_overlap_gap),
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(&summary)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Per-step trace CSV: `t, mean L_self, mean L_stitch, mean overlap gap`.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,mean_self_loss,mean_stitch_loss,mean_overlap_gap")?;
    for row in trace {
        writeln!(
            f,
            "{},{},{},{}",
            row.step, row.mean_self_loss, row.mean_stitch_loss, row.mean_overlap_gap
        )?;
    }
    Ok(())
}
