//! Synthetic datasets with a 3-level metadata hierarchy
//! (Entity -> Month -> Day), used by the CLI's `make-data` command and the
//! test suites. Deterministic per seed.

use crate::dataset::SeriesDataset;
use crate::rng::{normal_tensor_from, NoiseStreams, StreamKind};
use crate::{Result, Tensor};
use std::f64::consts::PI;

const ENTITIES: [&str; 3] = ["A", "B", "C"];
const MONTHS: usize = 12;

/// Per-entity baseline level; the noise-free yearly pattern averages to
/// exactly this, which the generator self-check exploits.
pub fn entity_offset(entity_index: usize) -> f64 {
    entity_index as f64
}

fn hierarchy_days(length: usize) -> usize {
    (length / (ENTITIES.len() * MONTHS)).max(1)
}

fn build_metadata(days: usize) -> (Vec<Vec<String>>, Vec<(usize, usize, usize)>) {
    let mut rows = Vec::new();
    let mut index = Vec::new();
    for (e, entity) in ENTITIES.iter().enumerate() {
        for m in 0..MONTHS {
            for d in 0..days {
                rows.push(vec![
                    entity.to_string(),
                    (m + 1).to_string(),
                    (d + 1).to_string(),
                ]);
                index.push((e, m, d));
            }
        }
    }
    (rows, index)
}

fn columns() -> (Vec<String>, fn(usize) -> Vec<String>) {
    fn chans(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }
    (
        vec!["Entity".into(), "Month".into(), "Day".into()],
        chans,
    )
}

/// Metadata-dependent sinusoids plus noise. Each entity has its own offset,
/// amplitude and phase; each channel its own yearly harmonic, plus a shared
/// within-month wave tied to the day. The noise-free signal averages to the
/// entity offset over a full year.
pub fn calendar_sines(length: usize, channels: usize, seed: u64) -> Result<SeriesDataset> {
    let days = hierarchy_days(length);
    let (metadata, index) = build_metadata(days);
    let rows = metadata.len();
    let streams = NoiseStreams::new(seed);
    let mut rng = streams.stream(StreamKind::DataGen, 0, 0);
    let noise = normal_tensor_from(&mut rng, &[rows, channels]);

    let mut values = Vec::with_capacity(rows * channels);
    for (r, &(e, m, d)) in index.iter().enumerate() {
        let year_frac = (m * days + d) as f64 / (MONTHS * days) as f64;
        let day_frac = d as f64 / days as f64;
        let amp = 1.0 + 0.5 * e as f64;
        let phase = 2.0 * PI * e as f64 / 3.0;
        for c in 0..channels {
            let harmonic = (c + 1) as f64;
            let v = entity_offset(e)
                + amp * (2.0 * PI * year_frac * harmonic + phase).sin()
                + 0.4 * (2.0 * PI * day_frac).sin()
                + 0.1 * noise.get(r, c);
            values.push(v);
        }
    }
    let (meta_cols, chans) = columns();
    SeriesDataset::from_parts(
        meta_cols,
        chans(channels),
        metadata,
        Tensor::new(vec![rows, channels], values)?,
    )
}

/// Mean-reverting AR(1) noise around the per-entity offset, with channel 0
/// leaking into later channels so cross-channel correlations are non-trivial.
pub fn ar1_hierarchy(length: usize, channels: usize, seed: u64) -> Result<SeriesDataset> {
    let days = hierarchy_days(length);
    let (metadata, index) = build_metadata(days);
    let rows = metadata.len();
    let streams = NoiseStreams::new(seed);
    let mut rng = streams.stream(StreamKind::DataGen, 1, 0);
    let noise = normal_tensor_from(&mut rng, &[rows, channels]);

    let rho = 0.9;
    let sigma = 0.3;
    let mut values = vec![0.0; rows * channels];
    let mut state = vec![0.0; channels];
    let mut prev_entity = usize::MAX;
    for (r, &(e, _, _)) in index.iter().enumerate() {
        if e != prev_entity {
            state = vec![0.0; channels];
            prev_entity = e;
        }
        for c in 0..channels {
            state[c] = rho * state[c] + sigma * noise.get(r, c);
            let leak = if c > 0 {
                0.5 * values[r * channels]
            } else {
                0.0
            };
            values[r * channels + c] = entity_offset(e) + state[c] + leak;
        }
    }
    let (meta_cols, chans) = columns();
    SeriesDataset::from_parts(
        meta_cols,
        chans(channels),
        metadata,
        Tensor::new(vec![rows, channels], values)?,
    )
}
