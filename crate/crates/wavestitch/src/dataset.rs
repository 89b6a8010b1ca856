//! CSV ingestion, root-level train/test splitting, condition-to-mask
//! resolution, window extraction, and window merging.

use crate::rng::{NoiseStreams, StreamKind};
use crate::{Error, Real, Result, Tensor};
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// A metadata table (`M x L` categorical columns, hierarchy order, root
/// first) plus a signal matrix (`M x C`). Row order defines the timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub metadata_columns: Vec<String>,
    pub channel_columns: Vec<String>,
    pub metadata: Vec<Vec<String>>,
    pub signals: Tensor,
}

impl SeriesDataset {
    pub fn from_parts(
        metadata_columns: Vec<String>,
        channel_columns: Vec<String>,
        metadata: Vec<Vec<String>>,
        signals: Tensor,
    ) -> Result<Self> {
        if metadata.len() != signals.rows() {
            return Err(Error::Config(format!(
                "metadata has {} rows but signals have {}",
                metadata.len(),
                signals.rows()
            )));
        }
        if signals.cols() != channel_columns.len() {
            return Err(Error::Config(format!(
                "{} channel columns declared but signals have {} channels",
                channel_columns.len(),
                signals.cols()
            )));
        }
        Ok(Self {
            metadata_columns,
            channel_columns,
            metadata,
            signals,
        })
    }

    /// Number of timesteps `M`.
    pub fn len(&self) -> usize {
        self.metadata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metadata.is_empty()
    }

    /// Number of metadata columns `L`.
    pub fn metadata_width(&self) -> usize {
        self.metadata_columns.len()
    }

    /// Number of signal channels `C`.
    pub fn channels(&self) -> usize {
        self.channel_columns.len()
    }

    /// Load a CSV with a header row. Rows are kept in file order; the file
    /// order defines the timeline.
    pub fn load_csv(
        path: &Path,
        metadata_columns: &[String],
        channel_columns: &[String],
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)?;
        let headers: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let col_index = |name: &String| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))
        };
        let meta_idx: Vec<usize> = metadata_columns
            .iter()
            .map(col_index)
            .collect::<Result<_>>()?;
        let chan_idx: Vec<usize> = channel_columns
            .iter()
            .map(col_index)
            .collect::<Result<_>>()?;

        let mut metadata = Vec::new();
        let mut values: Vec<Real> = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let row_no = i + 1;
            let meta_row: Vec<String> = meta_idx
                .iter()
                .map(|&c| record.get(c).unwrap_or("").trim().to_string())
                .collect();
            for (&c, name) in chan_idx.iter().zip(channel_columns.iter()) {
                let cell = record.get(c).unwrap_or("").trim();
                if cell.is_empty() {
                    return Err(Error::BadCell {
                        row: row_no,
                        column: name.clone(),
                        reason: "empty signal cell".into(),
                    });
                }
                let v: Real = cell.parse().map_err(|_| Error::BadCell {
                    row: row_no,
                    column: name.clone(),
                    reason: format!("not numeric: `{cell}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::BadCell {
                        row: row_no,
                        column: name.clone(),
                        reason: "non-finite value".into(),
                    });
                }
                values.push(v);
            }
            metadata.push(meta_row);
        }
        let signals = Tensor::new(vec![metadata.len(), channel_columns.len()], values)?;
        Self::from_parts(
            metadata_columns.to_vec(),
            channel_columns.to_vec(),
            metadata,
            signals,
        )
    }

    /// Write the dataset as CSV (metadata columns first, then channels).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<&str> = self
            .metadata_columns
            .iter()
            .chain(self.channel_columns.iter())
            .map(|s| s.as_str())
            .collect();
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = self.metadata[r].clone();
            for c in 0..self.channels() {
                rec.push(format!("{}", self.signals.get(r, c)));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Partition rows by the root-level (first) metadata column: rows whose
    /// root equals `root_value` become the test set, the rest the training
    /// set. Both preserve row order.
    pub fn split_by_root(&self, root_value: &str) -> Result<(SeriesDataset, SeriesDataset)> {
        let root_matches: Vec<bool> = self
            .metadata
            .iter()
            .map(|row| row[0] == root_value)
            .collect();
        if !root_matches.iter().any(|&b| b) {
            return Err(Error::RootValueAbsent(root_value.to_string()));
        }
        if root_matches.iter().all(|&b| b) {
            return Err(Error::EmptyTrainAfterSplit(root_value.to_string()));
        }
        let select = |keep_test: bool| -> SeriesDataset {
            let mut meta = Vec::new();
            let mut vals = Vec::new();
            for (r, &is_test) in root_matches.iter().enumerate() {
                if is_test == keep_test {
                    meta.push(self.metadata[r].clone());
                    for c in 0..self.channels() {
                        vals.push(self.signals.get(r, c));
                    }
                }
            }
            let rows = meta.len();
            SeriesDataset {
                metadata_columns: self.metadata_columns.clone(),
                channel_columns: self.channel_columns.clone(),
                metadata: meta,
                signals: Tensor::new(vec![rows, self.channels()], vals)
                    .expect("the selected rows form a valid matrix"),
            }
        };
        Ok((select(false), select(true)))
    }
}

/// One entry per metadata column: a fixed category or a wildcard.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    entries: Vec<Option<String>>,
}

impl Condition {
    pub fn new(entries: Vec<Option<String>>) -> Self {
        Self { entries }
    }

    pub fn all_wildcards(width: usize) -> Self {
        Self {
            entries: vec![None; width],
        }
    }

    /// Parse `"(2018, *, *, 6)"` (parentheses optional); `*` is a wildcard.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        let trimmed = trimmed
            .strip_prefix('(')
            .and_then(|t| t.strip_suffix(')'))
            .unwrap_or(trimmed);
        if trimmed.trim().is_empty() {
            return Err(Error::Config("empty condition".into()));
        }
        let entries = trimmed
            .split(',')
            .map(|part| {
                let p = part.trim();
                if p == "*" {
                    None
                } else {
                    Some(p.to_string())
                }
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Option<String>] {
        &self.entries
    }

    pub fn matches(&self, row: &[String]) -> bool {
        self.entries
            .iter()
            .zip(row.iter())
            .all(|(e, v)| e.as_deref().is_none_or(|fixed| fixed == v))
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<&str> = self
            .entries
            .iter()
            .map(|e| e.as_deref().unwrap_or("*"))
            .collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Per-timestep, per-channel generation flags: `true` means the entry
/// requires generation, `false` that it is observed. Task builders produce
/// whole-row masks; per-channel masks stay representable.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    flags: Vec<bool>,
}

impl Mask {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            flags: vec![value; rows * cols],
        }
    }

    pub fn from_row_flags(row_flags: &[bool], cols: usize) -> Self {
        let rows = row_flags.len();
        let mut flags = Vec::with_capacity(rows * cols);
        for &f in row_flags {
            flags.extend(std::iter::repeat(f).take(cols));
        }
        Self { rows, cols, flags }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn flag(&self, r: usize, c: usize) -> bool {
        self.flags[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.flags[r * self.cols + c] = v;
    }

    /// Whole row needs generation (true if any entry does).
    pub fn row_flag(&self, r: usize) -> bool {
        (0..self.cols).any(|c| self.flag(r, c))
    }

    /// Number of entries flagged for generation.
    pub fn generated_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn generated_row_count(&self) -> usize {
        (0..self.rows).filter(|&r| self.row_flag(r)).count()
    }

    /// Union of generation flags; supports combining multiple conditions.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "mask_union",
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            });
        }
        let flags = self
            .flags
            .iter()
            .zip(other.flags.iter())
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(Mask {
            rows: self.rows,
            cols: self.cols,
            flags,
        })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Mask {
        let flags = self.flags[start * self.cols..end * self.cols].to_vec();
        Mask {
            rows: end - start,
            cols: self.cols,
            flags,
        }
    }

    /// 1.0 where observed, 0.0 where generated (the `1 - m` factor).
    pub fn keep_tensor(&self) -> Tensor {
        let data = self
            .flags
            .iter()
            .map(|&f| if f { 0.0 } else { 1.0 })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask weights are finite")
    }
}

/// `m = 1` exactly where every fixed entry of the condition equals the row's
/// metadata; wildcards match anything. An unknown fixed value yields an
/// all-zero mask with a warning.
pub fn condition_to_mask(data: &SeriesDataset, cond: &Condition) -> Result<Mask> {
    if cond.len() != data.metadata_width() {
        return Err(Error::ConditionLength {
            got: cond.len(),
            expected: data.metadata_width(),
        });
    }
    for (c, entry) in cond.entries().iter().enumerate() {
        if let Some(fixed) = entry {
            let known = data.metadata.iter().any(|row| &row[c] == fixed);
            if !known {
                log::warn!(
                    "condition value `{fixed}` not found in column `{}`; mask is empty",
                    data.metadata_columns[c]
                );
                return Ok(Mask::filled(data.len(), data.channels(), false));
            }
        }
    }
    let row_flags: Vec<bool> = data.metadata.iter().map(|row| cond.matches(row)).collect();
    Ok(Mask::from_row_flags(&row_flags, data.channels()))
}

/// Mask exactly `round(fraction * M)` rows, chosen uniformly without
/// replacement, deterministically per seed.
pub fn random_mask(data: &SeriesDataset, fraction: f64, seed: u64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "missing fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let m = data.len();
    let k = (fraction * m as f64).round() as usize;
    let mut indices: Vec<usize> = (0..m).collect();
    let mut rng = NoiseStreams::new(seed).stream(StreamKind::MaskDraw, 0, 0);
    // Partial Fisher-Yates: the first k entries are the chosen rows.
    for i in 0..k.min(m.saturating_sub(1)) {
        let j = rng.gen_range(i..m);
        indices.swap(i, j);
    }
    let mut row_flags = vec![false; m];
    for &i in indices.iter().take(k) {
        row_flags[i] = true;
    }
    Ok(Mask::from_row_flags(&row_flags, data.channels()))
}

/// Which window's value survives where overlapping windows disagree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapOrder {
    /// Earlier window keeps its values; equivalently, each window past the
    /// first contributes only the timesteps beyond its predecessor's end.
    FirstWins,
    /// Later windows overwrite earlier ones.
    LastWins,
}

/// Overlapping `(signal, metadata, mask)` windows of a fixed width, spaced by
/// a stride, with the last start clamped so the final window ends exactly at
/// the last timestep.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub width: usize,
    pub stride: usize,
    pub total_len: usize,
    pub starts: Vec<usize>,
    pub signals: Vec<Tensor>,
    pub metadata: Vec<Tensor>,
    pub masks: Vec<Mask>,
}

/// Window count `ceil((M - w) / s) + 1` with the clamped-start layout.
pub fn window_starts(total_len: usize, width: usize, stride: usize) -> Result<Vec<usize>> {
    if width > total_len {
        return Err(Error::WindowTooWide {
            w: width,
            m: total_len,
        });
    }
    if stride == 0 {
        return Err(Error::Window("stride must be at least 1".into()));
    }
    if stride > width {
        return Err(Error::StrideTooLarge {
            s: stride,
            w: width,
        });
    }
    let tail = total_len - width;
    let count = if tail == 0 {
        1
    } else {
        (tail + stride - 1) / stride + 1
    };
    Ok((0..count).map(|j| (j * stride).min(tail)).collect())
}

/// Slice a standardized signal matrix, its encoded metadata, and the task
/// mask into overlapping windows.
pub fn make_windows(
    signals: &Tensor,
    metadata_encoded: &Tensor,
    mask: &Mask,
    width: usize,
    stride: usize,
) -> Result<WindowSet> {
    let total_len = signals.rows();
    if metadata_encoded.rows() != total_len || mask.rows() != total_len {
        return Err(Error::ShapeMismatch {
            op: "make_windows",
            left: vec![total_len],
            right: vec![metadata_encoded.rows(), mask.rows()],
        });
    }
    let starts = window_starts(total_len, width, stride)?;
    let mut sig = Vec::with_capacity(starts.len());
    let mut meta = Vec::with_capacity(starts.len());
    let mut masks = Vec::with_capacity(starts.len());
    for &st in &starts {
        sig.push(signals.slice_rows(st, st + width)?);
        meta.push(metadata_encoded.slice_rows(st, st + width)?);
        masks.push(mask.slice_rows(st, st + width));
    }
    Ok(WindowSet {
        width,
        stride,
        total_len,
        starts,
        signals: sig,
        metadata: meta,
        masks,
    })
}

impl WindowSet {
    /// Number of windows `J`.
    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// Start-offset difference between window `j` and its predecessor.
    /// Equals the stride everywhere except possibly the clamped last window.
    pub fn offset_from_prev(&self, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            self.starts[j] - self.starts[j - 1]
        }
    }

    fn check_estimates(&self, estimates: &[Tensor]) -> Result<usize> {
        if estimates.len() != self.count() {
            return Err(Error::Window(format!(
                "{} window estimates but {} windows",
                estimates.len(),
                self.count()
            )));
        }
        let cols = estimates
            .first()
            .map(|t| t.cols())
            .ok_or_else(|| Error::Window("no windows to merge".into()))?;
        for (j, est) in estimates.iter().enumerate() {
            if est.shape() != [self.width, cols] {
                return Err(Error::Window(format!(
                    "estimate {j} has shape {:?}, expected [{}, {cols}]",
                    est.shape(),
                    self.width
                )));
            }
        }
        Ok(cols)
    }

    /// Merge per-window estimates into the full sequence: the first window in
    /// full, then each later window's timesteps beyond its predecessor's end.
    pub fn merge(&self, estimates: &[Tensor]) -> Result<Tensor> {
        let cols = self.check_estimates(estimates)?;
        let mut out = Tensor::zeros(&[self.total_len, cols]);
        let mut prev_end = 0usize;
        for (j, est) in estimates.iter().enumerate() {
            let start = self.starts[j];
            let end = start + self.width;
            for r in prev_end..end {
                for c in 0..cols {
                    out.set(r, c, est.get(r - start, c));
                }
            }
            prev_end = end;
        }
        Ok(out)
    }

    /// Merge writing whole windows in ascending start order under the given
    /// overlap-resolution order.
    pub fn merge_with_order(&self, estimates: &[Tensor], order: OverlapOrder) -> Result<Tensor> {
        let cols = self.check_estimates(estimates)?;
        let mut out = Tensor::zeros(&[self.total_len, cols]);
        let mut written = vec![false; self.total_len];
        for (j, est) in estimates.iter().enumerate() {
            let start = self.starts[j];
            for r in start..start + self.width {
                if order == OverlapOrder::FirstWins && written[r] {
                    continue;
                }
                written[r] = true;
                for c in 0..cols {
                    out.set(r, c, est.get(r - start, c));
                }
            }
        }
        Ok(out)
    }
}

/// Write a generated sequence as CSV: 1-based timestep index, row-level mask
/// flag, then one column per channel.
pub fn write_sequence_csv(
    path: &Path,
    sequence: &Tensor,
    mask: &Mask,
    channel_columns: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestep".to_string(), "mask".to_string()];
    header.extend(channel_columns.iter().cloned());
    w.write_record(&header)?;
    for r in 0..sequence.rows() {
        let mut rec = vec![
            (r + 1).to_string(),
            if mask.row_flag(r) { "1" } else { "0" }.to_string(),
        ];
        for c in 0..sequence.cols() {
            rec.push(format!("{}", sequence.get(r, c)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a sequence CSV produced by [`write_sequence_csv`]; returns the value
/// matrix and the per-row mask flags.
pub fn read_sequence_csv(path: &Path) -> Result<(Tensor, Vec<bool>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    if headers.len() < 3 || headers[0] != "timestep" || headers[1] != "mask" {
        return Err(Error::Config(format!(
            "sequence CSV must start with `timestep,mask`, got {headers:?}"
        )));
    }
    let cols = headers.len() - 2;
    let mut values = Vec::new();
    let mut flags = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        flags.push(record.get(1).unwrap_or("0").trim() == "1");
        for c in 0..cols {
            let cell = record.get(c + 2).unwrap_or("").trim();
            let v: Real = cell.parse().map_err(|_| Error::BadCell {
                row: i + 1,
                column: headers[c + 2].clone(),
                reason: format!("not numeric: `{cell}`"),
            })?;
            values.push(v);
        }
    }
    let rows = flags.len();
    Ok((Tensor::new(vec![rows, cols], values)?, flags))
}

/// Write a row-level mask CSV (`timestep,mask`).
pub fn write_mask_csv(path: &Path, mask: &Mask) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "timestep,mask")?;
    for r in 0..mask.rows() {
        writeln!(f, "{},{}", r + 1, if mask.row_flag(r) { 1 } else { 0 })?;
    }
    Ok(())
}

/// Read a row-level mask CSV.
pub fn read_mask_csv(path: &Path) -> Result<Vec<bool>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut flags = Vec::new();
    for record in reader.records() {
        let record = record?;
        flags.push(record.get(1).unwrap_or("0").trim() == "1");
    }
    Ok(flags)
}
