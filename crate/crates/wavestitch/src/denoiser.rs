//! The noise-prediction network and its training loop.
//!
//! Per timestep, the input row is `[x_t | encoded metadata | step embedding]`,
//! passed through a two-hidden-layer fully connected stack applied
//! timestep-wise. A fixed centered moving-average matrix mixes the first
//! hidden layer along the time axis (concatenated with the unmixed features)
//! so the model sees local temporal context. The whole forward pass lives on
//! the compute graph, so gradients with respect to the input window are
//! available at inference.

use crate::encoding::MetadataCodec;
use crate::numerics::NodeId;
use crate::rng::{normal_tensor_from, NoiseStreams, StreamKind};
use crate::schedule::ScheduleSpec;
use crate::{Error, Graph, NoiseSchedule, ParameterStore, Real, Result, SignalScaler, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Window width `w`.
    pub window: usize,
    /// Signal channels `C`.
    pub channels: usize,
    /// Encoded metadata width `2L`.
    pub metadata_width: usize,
    /// Step-embedding dimension (even).
    pub step_embed_dim: usize,
    /// Width of both hidden layers.
    pub hidden: usize,
    /// Odd width of the centered moving-average mixing window.
    pub mix_width: usize,
    pub activation: Activation,
}

impl DenoiserConfig {
    pub fn new(window: usize, channels: usize, metadata_width: usize) -> Self {
        Self {
            window,
            channels,
            metadata_width,
            step_embed_dim: 16,
            hidden: 64,
            mix_width: 5,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "window, channels, hidden must be positive".into(),
            ));
        }
        if self.step_embed_dim == 0 || self.step_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "step_embed_dim must be even and positive, got {}",
                self.step_embed_dim
            )));
        }
        if self.mix_width % 2 == 0 {
            return Err(Error::Config(format!(
                "mix_width must be odd, got {}",
                self.mix_width
            )));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.channels + self.metadata_width + self.step_embed_dim
    }
}

/// Sinusoidal embedding of the diffusion step with geometric frequencies.
#[derive(Clone, Debug)]
pub struct StepEmbedding {
    dim: usize,
    frequencies: Vec<Real>,
}

impl StepEmbedding {
    pub fn new(dim: usize) -> Self {
        let half = dim / 2;
        let frequencies = (0..half)
            .map(|i| (10_000.0_f64).powf(-(i as f64) / half as f64))
            .collect();
        Self { dim, frequencies }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Deterministic embedding of step `t` as a single row.
    pub fn embed(&self, t: usize) -> Vec<Real> {
        let tv = t as Real;
        let mut row = Vec::with_capacity(self.dim);
        for &f in &self.frequencies {
            row.push((tv * f).sin());
            row.push((tv * f).cos());
        }
        row
    }

    /// The embedding repeated over every timestep of a window.
    pub fn embed_rows(&self, t: usize, rows: usize) -> Tensor {
        let row = self.embed(t);
        let mut data = Vec::with_capacity(rows * self.dim);
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        Tensor::new(vec![rows, self.dim], data).expect("sin/cos are finite")
    }
}

/// Row-normalized centered moving average over the time axis, truncated and
/// renormalized at the edges.
fn moving_average_matrix(window: usize, width: usize) -> Tensor {
    let radius = (width - 1) / 2;
    let mut mix = Tensor::zeros(&[window, window]);
    for i in 0..window {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(window - 1);
        let weight = 1.0 / (hi - lo + 1) as Real;
        for j in lo..=hi {
            mix.set(i, j, weight);
        }
    }
    mix
}

/// Nodes of interest from one denoiser forward pass on a graph.
pub struct DenoiserNodes {
    /// Predicted noise, shape `w x C`.
    pub eps_hat: NodeId,
    /// Parameter leaf nodes, present only when built trainable.
    pub param_nodes: Vec<(String, NodeId)>,
}

/// The noise-prediction function with its parameters.
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParameterStore,
    embedding: StepEmbedding,
    mix: Tensor,
}

impl Denoiser {
    /// Initialize with seeded scaled-normal weights and zero biases.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let streams = NoiseStreams::new(seed);
        let mut params = ParameterStore::new(1e-3);
        for (i, (name, shape)) in Self::param_shapes(&config).iter().enumerate() {
            let tensor = if name.starts_with('w') {
                let fan_in = shape[0] as Real;
                let std = (2.0 / fan_in).sqrt();
                let mut rng = streams.stream(StreamKind::ParamInit, i as u64, 0);
                normal_tensor_from(&mut rng, shape).scale(std)?
            } else {
                Tensor::zeros(shape)
            };
            params.insert(name, tensor);
        }
        let embedding = StepEmbedding::new(config.step_embed_dim);
        let mix = moving_average_matrix(config.window, config.mix_width);
        Ok(Self {
            config,
            params,
            embedding,
            mix,
        })
    }

    fn param_shapes(config: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
        let inw = config.input_width();
        let h = config.hidden;
        vec![
            ("w1".into(), vec![inw, h]),
            ("b1".into(), vec![h]),
            ("w2".into(), vec![2 * h, h]),
            ("b2".into(), vec![h]),
            ("w3".into(), vec![h, config.channels]),
            ("b3".into(), vec![config.channels]),
        ]
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn embedding(&self) -> &StepEmbedding {
        &self.embedding
    }

    fn check_shapes(&self, metadata: &Tensor, x_t: &Tensor) -> Result<()> {
        let w = self.config.window;
        if x_t.shape() != [w, self.config.channels] {
            return Err(Error::ShapeMismatch {
                op: "denoiser_forward(x_t)",
                left: x_t.shape().to_vec(),
                right: vec![w, self.config.channels],
            });
        }
        if metadata.shape() != [w, self.config.metadata_width] {
            return Err(Error::ShapeMismatch {
                op: "denoiser_forward(metadata)",
                left: metadata.shape().to_vec(),
                right: vec![w, self.config.metadata_width],
            });
        }
        Ok(())
    }

    /// Build the forward pass on `graph` with `x_node` already inserted
    /// (input or constant, the caller decides). With `trainable` the
    /// parameters enter as differentiation roots, otherwise as constants.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        metadata: &Tensor,
        x_node: NodeId,
        t: usize,
        trainable: bool,
    ) -> Result<DenoiserNodes> {
        self.check_shapes(metadata, graph.value(x_node)?)?;
        let mut param_nodes = Vec::new();
        let mut node_of = |g: &mut Graph, name: &str| -> Result<NodeId> {
            let tensor = self.params.get(name)?.clone();
            let id = if trainable {
                let id = g.input(tensor);
                param_nodes.push((name.to_string(), id));
                id
            } else {
                g.constant(tensor)
            };
            Ok(id)
        };
        let w1 = node_of(graph, "w1")?;
        let b1 = node_of(graph, "b1")?;
        let w2 = node_of(graph, "w2")?;
        let b2 = node_of(graph, "b2")?;
        let w3 = node_of(graph, "w3")?;
        let b3 = node_of(graph, "b3")?;

        let meta = graph.constant(metadata.clone());
        let emb = graph.constant(self.embedding.embed_rows(t, self.config.window));
        let mix = graph.constant(self.mix.clone());

        let cat = graph.concat(&[x_node, meta, emb])?;
        let z1 = graph.matmul(cat, w1)?;
        let z1 = graph.add(z1, b1)?;
        let h1 = self.activate(graph, z1)?;
        let mixed = graph.matmul(mix, h1)?;
        let h1m = graph.concat(&[h1, mixed])?;
        let z2 = graph.matmul(h1m, w2)?;
        let z2 = graph.add(z2, b2)?;
        let h2 = self.activate(graph, z2)?;
        let out = graph.matmul(h2, w3)?;
        let eps_hat = graph.add(out, b3)?;

        Ok(DenoiserNodes {
            eps_hat,
            param_nodes,
        })
    }

    fn activate(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self.config.activation {
            Activation::Silu => graph.silu(x),
            Activation::Tanh => graph.tanh(x),
        }
    }

    /// Plain forward pass: predicted noise of shape `w x C`, no gradients
    /// retained.
    pub fn forward(&self, metadata: &Tensor, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut graph = Graph::new();
        let x_node = graph.constant(x_t.clone());
        let nodes = self.forward_graph(&mut graph, metadata, x_node, t, false)?;
        Ok(graph.value(nodes.eps_hat)?.clone())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: Real,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            minibatch: 64,
            learning_rate: 1e-3,
            seed: 0,
            workers: 1,
        }
    }
}

pub(crate) fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Train on stride-1 windows of a standardized signal matrix. Each window
/// draws a uniform step `t` and fresh noise from its own `(epoch, window)`
/// substream, is forward-noised in closed form, and contributes the mean
/// squared error between drawn and predicted noise. Minibatch gradients are
/// reduced in window order, so the run is reproducible for any worker count.
/// Returns per-epoch mean losses.
pub fn train(
    model: &mut Denoiser,
    signals: &Tensor,
    metadata_encoded: &Tensor,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<Real>> {
    let w = model.config.window;
    let m = signals.rows();
    if w > m {
        return Err(Error::WindowTooWide { w, m });
    }
    if metadata_encoded.rows() != m {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: vec![m],
            right: vec![metadata_encoded.rows()],
        });
    }
    if cfg.minibatch == 0 {
        return Err(Error::Config("minibatch must be at least 1".into()));
    }
    model.params.set_learning_rate(cfg.learning_rate);
    let streams = NoiseStreams::new(cfg.seed);
    let pool = build_pool(cfg.workers)?;
    let starts: Vec<usize> = (0..=m - w).collect();
    let steps = sched.steps();

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = starts.clone();
        let mut shuffle_rng = streams.stream(StreamKind::Shuffle, epoch as u64, 0);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        for (mb, chunk) in order.chunks(cfg.minibatch).enumerate() {
            let results: Vec<Result<(Real, Vec<(String, Tensor)>)>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&start| {
                        train_window(
                            model,
                            signals,
                            metadata_encoded,
                            sched,
                            &streams,
                            epoch,
                            start,
                            w,
                            steps,
                        )
                    })
                    .collect()
            });
            let mut batch_loss = 0.0;
            for res in results {
                let (loss, grads) =
                    res.map_err(|e| wrap_nonfinite(e, epoch, mb, &epoch_losses))?;
                batch_loss += loss;
                for (name, grad) in grads {
                    model.params.accumulate(&name, &grad)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    minibatch: mb,
                    last_loss: epoch_losses.last().copied(),
                });
            }
            model.params.scale_grads(1.0 / chunk.len() as Real)?;
            model.params.sgd_step()?;
            model.params.zero_grads();
            loss_sum += batch_loss;
        }
        epoch_losses.push(loss_sum / starts.len() as Real);
    }
    Ok(epoch_losses)
}

fn wrap_nonfinite(e: Error, epoch: usize, minibatch: usize, losses: &[Real]) -> Error {
    if e.is_numerical() {
        Error::NonFiniteLoss {
            epoch,
            minibatch,
            last_loss: losses.last().copied(),
        }
    } else {
        e
    }
}

#[allow(clippy::too_many_arguments)]
fn train_window(
    model: &Denoiser,
    signals: &Tensor,
    metadata_encoded: &Tensor,
    sched: &NoiseSchedule,
    streams: &NoiseStreams,
    epoch: usize,
    start: usize,
    w: usize,
    steps: usize,
) -> Result<(Real, Vec<(String, Tensor)>)> {
    let x0 = signals.slice_rows(start, start + w)?;
    let meta = metadata_encoded.slice_rows(start, start + w)?;
    let mut rng = streams.stream(StreamKind::TrainDraw, epoch as u64, start as u64);
    let t = rng.gen_range(1..=steps);
    let eps = normal_tensor_from(&mut rng, x0.shape());
    let x_t = sched.forward_noise_to(&x0, t, &eps)?;

    let mut graph = Graph::new();
    let x_node = graph.constant(x_t);
    let nodes = model.forward_graph(&mut graph, &meta, x_node, t, true)?;
    let target = graph.constant(eps);
    let loss_node = graph.mse(nodes.eps_hat, target)?;
    let loss = graph
        .value(loss_node)?
        .scalar_value()
        .expect("mse is scalar");

    let root_ids: Vec<NodeId> = nodes.param_nodes.iter().map(|(_, id)| *id).collect();
    let grads = graph.backward(&root_ids)?;
    let named = nodes
        .param_nodes
        .into_iter()
        .map(|(name, id)| (name, grads[&id].clone()))
        .collect();
    Ok((loss, named))
}

/// Everything needed to resume inference: config, schedule recipe, codec,
/// scaler, dataset schema, and the parameter tensors. JSON with a version
/// field; save -> load -> save is byte-identical.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub metadata_columns: Vec<String>,
    pub channel_columns: Vec<String>,
    pub codec: MetadataCodec,
    pub scaler: SignalScaler,
    pub params: BTreeMap<String, Tensor>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(
        model: &Denoiser,
        schedule: ScheduleSpec,
        codec: MetadataCodec,
        scaler: SignalScaler,
        metadata_columns: Vec<String>,
        channel_columns: Vec<String>,
    ) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(name, tensor)| (name.to_string(), tensor.clone()))
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            schedule,
            metadata_columns,
            channel_columns,
            codec,
            scaler,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let text = serde_json::to_string_pretty(self)?;
        file.write_all(text.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the denoiser with the stored parameters.
    pub fn build_model(&self) -> Result<Denoiser> {
        let mut model = Denoiser::init(self.config.clone(), 0)?;
        let expected: Vec<String> = model.params().names().map(String::from).collect();
        let stored: Vec<String> = self.params.keys().cloned().collect();
        if expected != stored {
            return Err(Error::Checkpoint(format!(
                "parameter names {stored:?} do not match the architecture {expected:?}"
            )));
        }
        for (name, tensor) in &self.params {
            model.params_mut().set(name, tensor.clone())?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleKind, SigmaConvention};
    use crate::synth;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            window: 8,
            channels: 2,
            metadata_width: 6,
            step_embed_dim: 8,
            hidden: 16,
            mix_width: 3,
            activation: Activation::Silu,
        }
    }

    fn small_sched() -> NoiseSchedule {
        NoiseSchedule::linear(
            40,
            0.9995,
            0.95,
            ScheduleKind::LinearAlpha,
            SigmaConvention::Paper,
        )
        .unwrap()
    }

    fn random_inputs(cfg: &DenoiserConfig, seed: u64) -> (Tensor, Tensor) {
        let streams = NoiseStreams::new(seed);
        let meta = streams.normal_tensor(
            StreamKind::DataGen,
            0,
            1,
            &[cfg.window, cfg.metadata_width],
        );
        let x = streams.normal_tensor(StreamKind::DataGen, 0, 2, &[cfg.window, cfg.channels]);
        (meta, x)
    }

    #[test]
    fn forward_shape_and_finiteness_on_zeros() {
        let cfg = small_config();
        let model = Denoiser::init(cfg.clone(), 1).unwrap();
        let meta = Tensor::zeros(&[cfg.window, cfg.metadata_width]);
        let x = Tensor::zeros(&[cfg.window, cfg.channels]);
        let out = model.forward(&meta, &x, 1).unwrap();
        assert_eq!(out.shape(), &[cfg.window, cfg.channels]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_pure() {
        let cfg = small_config();
        let model = Denoiser::init(cfg.clone(), 2).unwrap();
        let (meta, x) = random_inputs(&cfg, 5);
        let a = model.forward(&meta, &x, 7).unwrap();
        let b = model.forward(&meta, &x, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let cfg = small_config();
        let model = Denoiser::init(cfg.clone(), 3).unwrap();
        let meta = Tensor::zeros(&[cfg.window, cfg.metadata_width]);
        let bad_x = Tensor::zeros(&[cfg.window + 1, cfg.channels]);
        assert!(model.forward(&meta, &bad_x, 1).is_err());
        let bad_meta = Tensor::zeros(&[cfg.window, cfg.metadata_width + 2]);
        let x = Tensor::zeros(&[cfg.window, cfg.channels]);
        assert!(model.forward(&bad_meta, &x, 1).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = small_config();
        let model = Denoiser::init(cfg.clone(), 4).unwrap();
        let (meta, x0) = random_inputs(&cfg, 6);

        let eval = |x: &Tensor| -> Real {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let nodes = model.forward_graph(&mut g, &meta, xn, 5, false).unwrap();
            let s = g.sum(nodes.eps_hat).unwrap();
            g.value(s).unwrap().scalar_value().unwrap()
        };

        let mut g = Graph::new();
        let xn = g.input(x0.clone());
        let nodes = model.forward_graph(&mut g, &meta, xn, 5, false).unwrap();
        g.sum(nodes.eps_hat).unwrap();
        let analytic = g.backward(&[xn]).unwrap()[&xn].clone();

        let h = 1e-5;
        let mut numeric = Vec::with_capacity(x0.numel());
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
        let max_err = analytic
            .data()
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).abs() / scale.max(1e-12))
            .fold(0.0, f64::max);
        assert!(max_err < 1e-5, "relative error {max_err}");
    }

    #[test]
    fn step_embedding_distinct_and_deterministic() {
        let emb = StepEmbedding::new(16);
        let mut seen: Vec<Vec<Real>> = Vec::new();
        for t in 1..=200 {
            let e = emb.embed(t);
            assert_eq!(e, emb.embed(t));
            for prev in &seen {
                let diff: Real = prev.iter().zip(e.iter()).map(|(a, b)| (a - b).abs()).sum();
                assert!(diff > 1e-9, "steps collide at t={t}");
            }
            seen.push(e);
        }
    }

    #[test]
    fn moving_average_rows_sum_to_one() {
        let mix = moving_average_matrix(8, 5);
        for r in 0..8 {
            let s: Real = (0..8).map(|c| mix.get(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // interior row has full width
        assert_eq!(mix.get(4, 2), 0.2);
        // edge rows renormalize over the in-range neighbours
        assert!((mix.get(0, 0) - 1.0 / 3.0).abs() < 1e-12);
    }

    fn training_fixture(seed: u64) -> (Tensor, Tensor, NoiseSchedule) {
        let data = synth::calendar_sines(144, 2, seed).unwrap();
        let codec = MetadataCodec::fit(&data.metadata_columns, &data.metadata);
        let meta = codec.encode_rows(&data.metadata).unwrap();
        let scaler = SignalScaler::fit(&data.signals).unwrap();
        let signals = scaler.apply(&data.signals).unwrap();
        (signals, meta, small_sched())
    }

    #[test]
    fn zero_learning_rate_freezes_parameters_and_trace() {
        let (signals, meta, sched) = training_fixture(1);
        let cfg = DenoiserConfig {
            metadata_width: meta.cols(),
            ..small_config()
        };
        let make = || Denoiser::init(cfg.clone(), 10).unwrap();
        let train_cfg = TrainConfig {
            epochs: 3,
            minibatch: 16,
            learning_rate: 0.0,
            seed: 5,
            workers: 1,
        };
        let mut m1 = make();
        let t1 = train(&mut m1, &signals, &meta, &sched, &train_cfg).unwrap();
        let mut m2 = make();
        let t2 = train(&mut m2, &signals, &meta, &sched, &train_cfg).unwrap();
        assert_eq!(t1, t2);
        // parameters unchanged
        let fresh = make();
        for (name, tensor) in fresh.params().iter() {
            assert_eq!(m1.params().get(name).unwrap(), tensor);
        }
    }

    #[test]
    fn training_reduces_loss_on_toy_sinusoids() {
        let (signals, meta, sched) = training_fixture(2);
        let cfg = DenoiserConfig {
            metadata_width: meta.cols(),
            ..small_config()
        };
        let mut model = Denoiser::init(cfg, 11).unwrap();
        let train_cfg = TrainConfig {
            epochs: 50,
            minibatch: 16,
            learning_rate: 3e-3,
            seed: 6,
            workers: 1,
        };
        let trace = train(&mut model, &signals, &meta, &sched, &train_cfg).unwrap();
        let first = trace[0];
        let last = *trace.last().unwrap();
        assert!(
            last < 0.5 * first,
            "loss did not halve: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic_across_worker_counts() {
        let (signals, meta, sched) = training_fixture(3);
        let cfg = DenoiserConfig {
            metadata_width: meta.cols(),
            ..small_config()
        };
        let run = |workers: usize| -> (Vec<Real>, Tensor) {
            let mut model = Denoiser::init(cfg.clone(), 12).unwrap();
            let train_cfg = TrainConfig {
                epochs: 2,
                minibatch: 16,
                learning_rate: 1e-3,
                seed: 7,
                workers,
            };
            let trace = train(&mut model, &signals, &meta, &sched, &train_cfg).unwrap();
            (trace, model.params().get("w1").unwrap().clone())
        };
        let (trace1, w1_single) = run(1);
        let (trace2, w1_multi) = run(2);
        assert_eq!(trace1, trace2);
        assert_eq!(w1_single, w1_multi);
    }

    #[test]
    fn pure_noise_dataset_approaches_analytic_floor() {
        // With x0 = 0 the noised window is sqrt(1 - abar_t) * eps, so the
        // noise is exactly recoverable and the optimal loss is 0. A short
        // training run must move substantially toward that floor.
        let m = 120;
        let cfg = small_config();
        let signals = Tensor::zeros(&[m, cfg.channels]);
        let streams = NoiseStreams::new(21);
        let meta = streams.normal_tensor(StreamKind::DataGen, 2, 0, &[m, cfg.metadata_width]);
        let sched = small_sched();
        let mut model = Denoiser::init(cfg, 13).unwrap();
        let train_cfg = TrainConfig {
            epochs: 60,
            minibatch: 32,
            learning_rate: 2e-3,
            seed: 8,
            workers: 1,
        };
        let trace = train(&mut model, &signals, &meta, &sched, &train_cfg).unwrap();
        let first = trace[0];
        let last = *trace.last().unwrap();
        assert!(last < 0.4 * first, "first {first}, last {last}");
    }

    #[test]
    fn metadata_conditioning_is_wired_through() {
        // Train briefly on data whose signal depends on the metadata, then
        // flip the metadata of one window: the prediction must change.
        let (signals, meta, sched) = training_fixture(4);
        let cfg = DenoiserConfig {
            metadata_width: meta.cols(),
            ..small_config()
        };
        let mut model = Denoiser::init(cfg.clone(), 14).unwrap();
        let train_cfg = TrainConfig {
            epochs: 5,
            minibatch: 32,
            learning_rate: 1e-3,
            seed: 9,
            workers: 1,
        };
        train(&mut model, &signals, &meta, &sched, &train_cfg).unwrap();

        let x = signals.slice_rows(0, cfg.window).unwrap();
        let meta_a = meta.slice_rows(0, cfg.window).unwrap();
        let meta_b = meta_a.scale(-1.0).unwrap(); // a different point on the circle
        let out_a = model.forward(&meta_a, &x, 10).unwrap();
        let out_b = model.forward(&meta_b, &x, 10).unwrap();
        let diff: Real = out_a
            .data()
            .iter()
            .zip(out_b.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "metadata has no effect on the prediction");
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical_and_reproduces_outputs() {
        let (signals, meta, _) = training_fixture(5);
        let cfg = DenoiserConfig {
            metadata_width: meta.cols(),
            ..small_config()
        };
        let model = Denoiser::init(cfg.clone(), 15).unwrap();
        let data = synth::calendar_sines(144, 2, 5).unwrap();
        let codec = MetadataCodec::fit(&data.metadata_columns, &data.metadata);
        let scaler = SignalScaler::fit(&data.signals).unwrap();
        let ckpt = Checkpoint::from_model(
            &model,
            ScheduleSpec::default(),
            codec,
            scaler,
            data.metadata_columns.clone(),
            data.channel_columns.clone(),
        );

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("model.json");
        let p2 = dir.path().join("model2.json");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "save -> load -> save must be byte-identical"
        );

        let rebuilt = loaded.build_model().unwrap();
        let x = signals.slice_rows(0, cfg.window).unwrap();
        let meta_w = meta.slice_rows(0, cfg.window).unwrap();
        assert_eq!(
            model.forward(&meta_w, &x, 3).unwrap(),
            rebuilt.forward(&meta_w, &x, 3).unwrap()
        );
    }

    #[test]
    fn checkpoint_version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let cfg = small_config();
        let model = Denoiser::init(cfg, 16).unwrap();
        let data = synth::calendar_sines(144, 2, 6).unwrap();
        let codec = MetadataCodec::fit(&data.metadata_columns, &data.metadata);
        let scaler = SignalScaler::fit(&data.signals).unwrap();
        let ckpt = Checkpoint::from_model(
            &model,
            ScheduleSpec::default(),
            codec,
            scaler,
            vec![],
            vec![],
        );
        ckpt.save(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            Checkpoint::load(&path).unwrap_err(),
            Error::Checkpoint(_)
        ));
    }
}
