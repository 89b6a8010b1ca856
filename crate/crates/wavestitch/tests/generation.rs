//! End-to-end generation runs: mode relations, call counts, determinism, and
//! the bit-exactness of reintroduced observations.

use std::sync::OnceLock;
use wavestitch::dataset::{condition_to_mask, make_windows, Condition, Mask, WindowSet};
use wavestitch::denoiser::{train, Denoiser, DenoiserConfig, TrainConfig};
use wavestitch::encoding::MetadataCodec;
use wavestitch::sampler::{
    generate, GenerationResult, GradientMode, SamplerConfig, SamplerMode, StitchMetric,
};
use wavestitch::schedule::{ScheduleKind, SigmaConvention};
use wavestitch::synth;
use wavestitch::{NoiseSchedule, SignalScaler, Tensor};

const WINDOW: usize = 12;
const T_STEPS: usize = 30;

struct Fixture {
    model: Denoiser,
    sched: NoiseSchedule,
    /// Standardized test-split signals (M x C).
    test_signals: Tensor,
    /// Encoded test-split metadata (M x 2L).
    test_meta: Tensor,
    channels: usize,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let data = synth::calendar_sines(216, 2, 41).unwrap();
        let (train_split, test_split) = data.split_by_root("C").unwrap();
        let codec = MetadataCodec::fit(&data.metadata_columns, &data.metadata);
        let scaler = SignalScaler::fit(&train_split.signals).unwrap();
        let sched = NoiseSchedule::linear(
            T_STEPS,
            0.9995,
            0.95,
            ScheduleKind::LinearAlpha,
            SigmaConvention::Paper,
        )
        .unwrap();
        let cfg = DenoiserConfig {
            step_embed_dim: 8,
            hidden: 24,
            mix_width: 3,
            ..DenoiserConfig::new(WINDOW, 2, codec.encoded_width())
        };
        let mut model = Denoiser::init(cfg, 7).unwrap();
        let train_cfg = TrainConfig {
            epochs: 30,
            minibatch: 16,
            learning_rate: 3e-3,
            seed: 3,
            workers: 2,
        };
        let train_meta = codec.encode_rows(&train_split.metadata).unwrap();
        let train_sig = scaler.apply(&train_split.signals).unwrap();
        train(&mut model, &train_sig, &train_meta, &sched, &train_cfg).unwrap();

        Fixture {
            model,
            sched,
            test_signals: scaler.apply(&test_split.signals).unwrap(),
            test_meta: codec.encode_rows(&test_split.metadata).unwrap(),
            channels: 2,
        }
    })
}

fn windows_with_mask(fx: &Fixture, mask: &Mask, stride: usize) -> WindowSet {
    make_windows(&fx.test_signals, &fx.test_meta, mask, WINDOW, stride).unwrap()
}

fn day_mask(fx: &Fixture) -> Mask {
    // fine-grained: mask one day per month within the test entity
    let data = synth::calendar_sines(216, 2, 41).unwrap();
    let (_, test_split) = data.split_by_root("C").unwrap();
    condition_to_mask(&test_split, &Condition::parse("(*, *, 3)").unwrap()).unwrap()
}

fn run(fx: &Fixture, windows: &WindowSet, cfg: &SamplerConfig) -> GenerationResult {
    generate(&fx.model, &fx.sched, windows, cfg).unwrap()
}

#[test]
fn fully_observed_input_is_returned_exactly() {
    let fx = fixture();
    let mask = Mask::filled(fx.test_signals.rows(), fx.channels, false);
    let windows = windows_with_mask(fx, &mask, 4);
    for mode in [
        SamplerMode::Parallel,
        SamplerMode::SelfOnly,
        SamplerMode::MetadataOnly,
        SamplerMode::Repaint,
        SamplerMode::Autoregressive,
    ] {
        let cfg = SamplerConfig {
            mode,
            seed: 1,
            workers: 1,
            ..SamplerConfig::default()
        };
        let result = run(fx, &windows, &cfg);
        assert_eq!(result.sequence, fx.test_signals, "mode {mode}");
    }
}

#[test]
fn observed_entries_are_bit_exact_in_every_mode() {
    let fx = fixture();
    let mask = day_mask(fx);
    let windows = windows_with_mask(fx, &mask, 4);
    for mode in [
        SamplerMode::Parallel,
        SamplerMode::SelfOnly,
        SamplerMode::MetadataOnly,
        SamplerMode::Repaint,
        SamplerMode::Autoregressive,
    ] {
        let cfg = SamplerConfig {
            mode,
            seed: 2,
            workers: 2,
            ..SamplerConfig::default()
        };
        let result = run(fx, &windows, &cfg);
        let mut generated_rows = 0;
        for r in 0..fx.test_signals.rows() {
            if mask.row_flag(r) {
                generated_rows += 1;
                continue;
            }
            for c in 0..fx.channels {
                assert_eq!(
                    result.sequence.get(r, c).to_bits(),
                    fx.test_signals.get(r, c).to_bits(),
                    "mode {mode}, row {r}"
                );
            }
        }
        assert!(generated_rows > 0);
    }
}

#[test]
fn batched_call_counts_match_closed_forms() {
    let fx = fixture();
    let mask = Mask::filled(fx.test_signals.rows(), fx.channels, true);
    let windows = windows_with_mask(fx, &mask, 4);
    let j = windows.count();
    assert!(j > 1);

    // J <= b: one batched call per step
    let cfg = SamplerConfig {
        seed: 3,
        ..SamplerConfig::default()
    };
    let result = run(fx, &windows, &cfg);
    assert_eq!(result.denoiser_calls, T_STEPS as u64);

    // small mini-batches: ceil(J / b) batched calls per step
    let cfg = SamplerConfig {
        batch: 3,
        seed: 3,
        ..SamplerConfig::default()
    };
    let result = run(fx, &windows, &cfg);
    assert_eq!(result.denoiser_calls, (T_STEPS * j.div_ceil(3)) as u64);

    // autoregressive: T * J single-window calls
    let cfg = SamplerConfig {
        mode: SamplerMode::Autoregressive,
        seed: 3,
        ..SamplerConfig::default()
    };
    let result = run(fx, &windows, &cfg);
    assert_eq!(result.denoiser_calls, (T_STEPS * j) as u64);
}

#[test]
fn parallel_output_is_worker_count_invariant() {
    let fx = fixture();
    let mask = day_mask(fx);
    let windows = windows_with_mask(fx, &mask, 4);
    let base = SamplerConfig {
        seed: 11,
        ..SamplerConfig::default()
    };
    let single = run(
        fx,
        &windows,
        &SamplerConfig {
            workers: 1,
            ..base.clone()
        },
    );
    let quad = run(
        fx,
        &windows,
        &SamplerConfig {
            workers: 4,
            ..base.clone()
        },
    );
    assert_eq!(single.sequence, quad.sequence);
    assert_eq!(single.denoiser_calls, quad.denoiser_calls);
    for (a, b) in single.trace.iter().zip(quad.trace.iter()) {
        assert_eq!(a.mean_self_loss.to_bits(), b.mean_self_loss.to_bits());
        assert_eq!(a.mean_stitch_loss.to_bits(), b.mean_stitch_loss.to_bits());
        assert_eq!(a.mean_overlap_gap.to_bits(), b.mean_overlap_gap.to_bits());
    }
    // and a repeated run with the same seed is identical
    let again = run(fx, &windows, &base);
    assert_eq!(single.sequence, again.sequence);
}

#[test]
fn single_window_parallel_equals_autoregressive() {
    let fx = fixture();
    let mask = Mask::filled(WINDOW, fx.channels, true);
    let sig = fx.test_signals.slice_rows(0, WINDOW).unwrap();
    let meta = fx.test_meta.slice_rows(0, WINDOW).unwrap();
    let windows = make_windows(&sig, &meta, &mask, WINDOW, 4).unwrap();
    assert_eq!(windows.count(), 1);
    let par = run(
        fx,
        &windows,
        &SamplerConfig {
            seed: 5,
            ..SamplerConfig::default()
        },
    );
    let ar = run(
        fx,
        &windows,
        &SamplerConfig {
            mode: SamplerMode::Autoregressive,
            seed: 5,
            ..SamplerConfig::default()
        },
    );
    assert_eq!(par.sequence, ar.sequence);
}

#[test]
fn zero_overlap_self_only_equals_parallel() {
    let fx = fixture();
    let mask = day_mask(fx);
    // stride = window: divide-and-conquer, the stitch term vanishes
    let windows = windows_with_mask(fx, &mask, WINDOW);
    let par = run(
        fx,
        &windows,
        &SamplerConfig {
            seed: 6,
            ..SamplerConfig::default()
        },
    );
    let self_only = run(
        fx,
        &windows,
        &SamplerConfig {
            mode: SamplerMode::SelfOnly,
            seed: 6,
            ..SamplerConfig::default()
        },
    );
    assert_eq!(par.sequence, self_only.sequence);
}

#[test]
fn eta_zero_parallel_equals_metadata_only() {
    let fx = fixture();
    let mask = day_mask(fx);
    let windows = windows_with_mask(fx, &mask, 4);
    let guided = run(
        fx,
        &windows,
        &SamplerConfig {
            eta: 0.0,
            seed: 7,
            ..SamplerConfig::default()
        },
    );
    let unguided = run(
        fx,
        &windows,
        &SamplerConfig {
            mode: SamplerMode::MetadataOnly,
            seed: 7,
            ..SamplerConfig::default()
        },
    );
    assert_eq!(guided.sequence, unguided.sequence);

    // all-masked, eta = 0, and self-only likewise collapses to metadata-only
    let all = Mask::filled(fx.test_signals.rows(), fx.channels, true);
    let windows = windows_with_mask(fx, &all, 4);
    let self_only = run(
        fx,
        &windows,
        &SamplerConfig {
            mode: SamplerMode::SelfOnly,
            eta: 0.0,
            seed: 7,
            ..SamplerConfig::default()
        },
    );
    let unguided = run(
        fx,
        &windows,
        &SamplerConfig {
            mode: SamplerMode::MetadataOnly,
            seed: 7,
            ..SamplerConfig::default()
        },
    );
    assert_eq!(self_only.sequence, unguided.sequence);
}

#[test]
fn repaint_ignores_the_guidance_coefficient() {
    let fx = fixture();
    let mask = day_mask(fx);
    let windows = windows_with_mask(fx, &mask, 4);
    let a = run(
        fx,
        &windows,
        &SamplerConfig {
            mode: SamplerMode::Repaint,
            eta: 0.0,
            seed: 8,
            ..SamplerConfig::default()
        },
    );
    let b = run(
        fx,
        &windows,
        &SamplerConfig {
            mode: SamplerMode::Repaint,
            eta: 5.0,
            seed: 8,
            ..SamplerConfig::default()
        },
    );
    assert_eq!(a.sequence, b.sequence);
}

#[test]
fn autoregressive_errors_propagate_forward() {
    // Changing observed values that only window 1 sees changes window 2's
    // output through the finalized-context chain.
    let fx = fixture();
    let m = fx.test_signals.rows();
    let stride = 8;
    let mut mask = Mask::filled(m, fx.channels, true);
    // observe rows 0..stride (exclusive to window 1)
    for r in 0..stride {
        for c in 0..fx.channels {
            mask.set(r, c, false);
        }
    }
    let windows = windows_with_mask(fx, &mask, stride);

    let mut altered = fx.test_signals.clone();
    for r in 0..stride {
        for c in 0..fx.channels {
            altered.set(r, c, altered.get(r, c) + 3.0);
        }
    }
    let altered_windows = make_windows(&altered, &fx.test_meta, &mask, WINDOW, stride).unwrap();

    let cfg = SamplerConfig {
        mode: SamplerMode::Autoregressive,
        seed: 9,
        ..SamplerConfig::default()
    };
    let base = run(fx, &windows, &cfg);
    let shifted = run(fx, &altered_windows, &cfg);
    // window 2 owns rows [window, window + stride); they must differ
    let mut diff = 0.0;
    for r in WINDOW..WINDOW + stride {
        for c in 0..fx.channels {
            diff += (base.sequence.get(r, c) - shifted.sequence.get(r, c)).abs();
        }
    }
    assert!(diff > 1e-9, "perturbation did not propagate: {diff}");
}

#[test]
fn jacobian_free_mode_runs_and_respects_observations() {
    let fx = fixture();
    let mask = day_mask(fx);
    let windows = windows_with_mask(fx, &mask, 4);
    let jf = run(
        fx,
        &windows,
        &SamplerConfig {
            gradient_mode: GradientMode::JacobianFree,
            seed: 10,
            ..SamplerConfig::default()
        },
    );
    let exact = run(
        fx,
        &windows,
        &SamplerConfig {
            seed: 10,
            ..SamplerConfig::default()
        },
    );
    assert_ne!(jf.sequence, exact.sequence);
    for r in 0..fx.test_signals.rows() {
        if !mask.row_flag(r) {
            for c in 0..fx.channels {
                assert_eq!(jf.sequence.get(r, c), fx.test_signals.get(r, c));
            }
        }
    }
}

#[test]
fn all_stitch_metrics_run_to_completion() {
    let fx = fixture();
    let mask = day_mask(fx);
    let windows = windows_with_mask(fx, &mask, 4);
    for metric in [
        StitchMetric::Mse,
        StitchMetric::Mae,
        StitchMetric::Cosine,
        StitchMetric::Pearson,
    ] {
        let cfg = SamplerConfig {
            stitch_metric: metric,
            seed: 12,
            ..SamplerConfig::default()
        };
        let result = run(fx, &windows, &cfg);
        assert!(result.sequence.data().iter().all(|v| v.is_finite()), "{metric}");
        assert_eq!(result.trace.len(), T_STEPS);
    }
}

#[test]
fn symmetric_stitch_runs_and_differs() {
    let fx = fixture();
    let mask = day_mask(fx);
    let windows = windows_with_mask(fx, &mask, 4);
    let plain = run(
        fx,
        &windows,
        &SamplerConfig {
            seed: 13,
            ..SamplerConfig::default()
        },
    );
    let symmetric = run(
        fx,
        &windows,
        &SamplerConfig {
            symmetric_stitch: true,
            seed: 13,
            ..SamplerConfig::default()
        },
    );
    assert_ne!(plain.sequence, symmetric.sequence);
}

#[test]
fn invalid_configs_are_rejected() {
    let fx = fixture();
    let mask = day_mask(fx);
    let windows = windows_with_mask(fx, &mask, 4);
    let bad_eta = SamplerConfig {
        eta: -0.1,
        ..SamplerConfig::default()
    };
    assert!(generate(&fx.model, &fx.sched, &windows, &bad_eta).is_err());
    let bad_batch = SamplerConfig {
        batch: 0,
        ..SamplerConfig::default()
    };
    assert!(generate(&fx.model, &fx.sched, &windows, &bad_batch).is_err());
}
