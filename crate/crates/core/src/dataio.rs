//! KPI trace ingestion, standardization, windowing, chronological splits and
//! the seeded regime-switching generator used for desk-scale runs.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Matrix;

/// A multivariate KPI stream: one row per timestamp, one column per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct KpiTrace {
    pub timestamps: Vec<i64>,
    pub values: Matrix,
    pub feature_names: Vec<String>,
    /// Rows discarded during ingestion because a cell was not numeric.
    pub dropped_rows: usize,
}

impl KpiTrace {
    pub fn new(timestamps: Vec<i64>, values: Matrix, feature_names: Vec<String>) -> Result<Self> {
        if timestamps.len() != values.rows() {
            return Err(dim_err(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                values.rows()
            )));
        }
        if feature_names.len() != values.cols() {
            return Err(dim_err(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                values.cols()
            )));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at row {}",
                w + 1
            )));
        }
        Ok(Self {
            timestamps,
            values,
            feature_names,
            dropped_rows: 0,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.values.rows()
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }
}

/// Reads a header-bearing CSV, keeping `feature_columns` in the given order.
///
/// Rows with any non-numeric selected cell (or a non-integer timestamp) are
/// dropped and counted in [`KpiTrace::dropped_rows`].
pub fn load_kpi_csv(
    path: impl AsRef<Path>,
    feature_columns: &[String],
    timestamp_column: &str,
    delimiter: u8,
) -> Result<KpiTrace> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);

    let mut missing = Vec::new();
    let ts_idx = find(timestamp_column);
    if ts_idx.is_none() {
        missing.push(timestamp_column.to_string());
    }
    let feat_idx: Vec<Option<usize>> = feature_columns.iter().map(|c| find(c)).collect();
    for (c, i) in feature_columns.iter().zip(&feat_idx) {
        if i.is_none() {
            missing.push(c.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: missing column(s): {}",
            path.display(),
            missing.join(", ")
        )));
    }
    let ts_idx = ts_idx.unwrap();
    let feat_idx: Vec<usize> = feat_idx.into_iter().map(Option::unwrap).collect();

    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    let mut dropped = 0;
    let mut row = Vec::with_capacity(feat_idx.len());
    for record in reader.records() {
        let record = record?;
        let ts = record.get(ts_idx).and_then(|s| s.trim().parse::<i64>().ok());
        row.clear();
        for &i in &feat_idx {
            match record
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
            {
                Some(v) => row.push(v),
                None => break,
            }
        }
        match ts {
            Some(ts) if row.len() == feat_idx.len() => {
                timestamps.push(ts);
                data.extend_from_slice(&row);
            }
            _ => dropped += 1,
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no usable rows", path.display())));
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} row(s) with non-numeric cells", path.display());
    }
    let values = Matrix::new(timestamps.len(), feat_idx.len(), data)?;
    let mut trace = KpiTrace::new(timestamps, values, feature_columns.to_vec())?;
    trace.dropped_rows = dropped;
    Ok(trace)
}

/// Writes a trace in the same CSV schema [`load_kpi_csv`] reads.
pub fn write_kpi_csv(path: impl AsRef<Path>, trace: &KpiTrace, timestamp_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![timestamp_column.to_string()];
    header.extend(trace.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (i, ts) in trace.timestamps.iter().enumerate() {
        let mut rec = vec![ts.to_string()];
        rec.extend(trace.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One integer label per line.
pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in labels {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad label line {l:?}")))
        })
        .collect()
}

/// Per-feature standardization statistics (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted_on: usize,
}

impl Scaler {
    /// Features whose std is exactly zero; they are centered but not rescaled.
    pub fn constant_features(&self) -> Vec<usize> {
        self.std
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    fn divisor(&self, j: usize) -> f64 {
        if self.std[j] == 0.0 {
            1.0
        } else {
            self.std[j]
        }
    }

    pub fn inverse_apply(&self, trace: &KpiTrace) -> Result<KpiTrace> {
        self.check_dims(trace)?;
        let mut out = trace.clone();
        for i in 0..out.values.rows() {
            for (j, v) in out.values.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.divisor(j) + self.mean[j];
            }
        }
        Ok(out)
    }

    fn check_dims(&self, trace: &KpiTrace) -> Result<()> {
        if trace.n_features() != self.mean.len() {
            return Err(dim_err(format!(
                "scaler fitted on {} features, trace has {}",
                self.mean.len(),
                trace.n_features()
            )));
        }
        Ok(())
    }
}

pub fn fit_scaler(trace: &KpiTrace, fit_rows: Range<usize>) -> Result<Scaler> {
    if fit_rows.is_empty() {
        return Err(Error::InvalidArgument("scaler fit range is empty".into()));
    }
    if fit_rows.end > trace.total_steps() {
        return Err(Error::InvalidArgument(format!(
            "scaler fit range {fit_rows:?} exceeds {} rows",
            trace.total_steps()
        )));
    }
    let d = trace.n_features();
    let n = fit_rows.len() as f64;
    let mut mean = vec![0.0; d];
    for i in fit_rows.clone() {
        for (m, v) in mean.iter_mut().zip(trace.values.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for i in fit_rows.clone() {
        for ((s, v), m) in var.iter_mut().zip(trace.values.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect::<Vec<_>>();
    let scaler = Scaler {
        mean,
        std,
        fitted_on: fit_rows.len(),
    };
    let constant = scaler.constant_features();
    if !constant.is_empty() {
        log::warn!("constant features (std 0) left unscaled: {constant:?}");
    }
    Ok(scaler)
}

pub fn apply_scaler(scaler: &Scaler, trace: &KpiTrace) -> Result<KpiTrace> {
    scaler.check_dims(trace)?;
    let mut out = trace.clone();
    for i in 0..out.values.rows() {
        for (j, v) in out.values.row_mut(i).iter_mut().enumerate() {
            *v = (*v - scaler.mean[j]) / scaler.divisor(j);
        }
    }
    Ok(out)
}

/// Sliding windows over a trace, each flattened time-major into one row of
/// `windows` (`x_1` first, then `x_2`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub windows: Matrix,
    pub window_len: usize,
    pub n_features: usize,
    pub stride: usize,
    pub origins: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        self.windows.row(i)
    }

    /// Windows `range` as a new dataset sharing geometry.
    pub fn subset(&self, range: Range<usize>) -> WindowedDataset {
        let idx: Vec<usize> = range.clone().collect();
        WindowedDataset {
            windows: self.windows.select_rows(&idx),
            window_len: self.window_len,
            n_features: self.n_features,
            stride: self.stride,
            origins: self.origins[range].to_vec(),
        }
    }
}

pub fn window_count(total_steps: usize, window_len: usize, stride: usize) -> Result<usize> {
    if stride == 0 || window_len == 0 {
        return Err(Error::InvalidArgument("window length and stride must be ≥ 1".into()));
    }
    if total_steps < window_len {
        return Err(Error::Data(format!(
            "trace has {total_steps} steps, shorter than window length {window_len}"
        )));
    }
    Ok((total_steps - window_len) / stride + 1)
}

pub fn make_windows(trace: &KpiTrace, window_len: usize, stride: usize) -> Result<WindowedDataset> {
    let n = window_count(trace.total_steps(), window_len, stride)?;
    let d = trace.n_features();
    let width = window_len * d;
    let mut data = Vec::with_capacity(n * width);
    let mut origins = Vec::with_capacity(n);
    let all = trace.values.data();
    for w in 0..n {
        let start = w * stride;
        origins.push(start);
        data.extend_from_slice(&all[start * d..(start + window_len) * d]);
    }
    Ok(WindowedDataset {
        windows: Matrix::from_raw(n, width, data),
        window_len,
        n_features: d,
        stride,
        origins,
    })
}

/// Chronological train/test boundary over window indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub boundary_index: usize,
    pub n_windows: usize,
}

impl SplitSpec {
    pub fn train(&self) -> Range<usize> {
        0..self.boundary_index
    }

    pub fn test(&self) -> Range<usize> {
        self.boundary_index..self.n_windows
    }

    /// Trace rows the scaler may see: everything covered by a training window.
    pub fn fit_rows(&self, window_len: usize, stride: usize) -> Range<usize> {
        0..(self.boundary_index - 1) * stride + window_len
    }
}

pub fn split_by_count(n_windows: usize, train_fraction: f64) -> Result<SplitSpec> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let boundary = (n_windows as f64 * train_fraction).floor() as usize;
    if boundary == 0 || boundary >= n_windows {
        return Err(Error::Data(format!(
            "train fraction {train_fraction} of {n_windows} windows leaves an empty side"
        )));
    }
    Ok(SplitSpec {
        train_fraction,
        boundary_index: boundary,
        n_windows,
    })
}

pub fn chronological_split(ds: &WindowedDataset, train_fraction: f64) -> Result<SplitSpec> {
    split_by_count(ds.len(), train_fraction)
}

/// One regime of the synthetic generator; every vector has one entry per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub ar: Vec<f64>,
    pub mean_offset: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Two-regime Markov-switching AR(1) generator.
///
/// Within regime `r`, feature `j` evolves as
/// `x_t = m_rj + a_rj (x_{t-1} - m_rj) + σ_rj ε_t`, so the process relaxes
/// toward the new regime's level after a switch instead of jumping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_features: usize,
    pub total_steps: usize,
    pub regimes: [RegimeSpec; 2],
    /// `switch_prob[r]`: probability of leaving regime `r` at each step.
    pub switch_prob: [f64; 2],
    pub start_regime: usize,
    pub step_ms: i64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.n_features;
        if d == 0 || self.total_steps == 0 {
            return Err(Error::InvalidArgument(
                "synth.n_features and synth.total_steps must be ≥ 1".into(),
            ));
        }
        for (r, p) in self.switch_prob.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidArgument(format!(
                    "synth.switch_prob[{r}] = {p} is not a probability"
                )));
            }
        }
        if self.start_regime > 1 {
            return Err(Error::InvalidArgument("synth.start_regime must be 0 or 1".into()));
        }
        for (r, reg) in self.regimes.iter().enumerate() {
            if reg.ar.len() != d || reg.mean_offset.len() != d || reg.noise.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "synth regime {r} vectors must have {d} entries"
                )));
            }
            if reg.ar.iter().any(|a| !(a.abs() < 1.0)) {
                return Err(Error::InvalidArgument(format!(
                    "synth regime {r}: AR coefficients must lie in (-1, 1)"
                )));
            }
            if reg.noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return Err(Error::InvalidArgument(format!(
                    "synth regime {r}: noise scales must be finite and ≥ 0"
                )));
            }
            if reg.mean_offset.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "synth regime {r}: mean offsets must be finite"
                )));
            }
        }
        Ok(())
    }
}

pub fn feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("kpi_{j:02}")).collect()
}

/// Generates a trace and the per-step regime labels. Labels are for
/// evaluation only.
pub fn synth_regime_series(cfg: &SynthConfig, seed: u64) -> Result<(KpiTrace, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.n_features;
    let mut regime = cfg.start_regime;
    let mut labels = Vec::with_capacity(cfg.total_steps);
    let mut data = Vec::with_capacity(cfg.total_steps * d);

    let first = &cfg.regimes[regime];
    let mut x: Vec<f64> = (0..d)
        .map(|j| {
            let stationary = first.noise[j] / (1.0 - first.ar[j] * first.ar[j]).sqrt();
            first.mean_offset[j] + stationary * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();

    for t in 0..cfg.total_steps {
        if t > 0 {
            if rng.random::<f64>() < cfg.switch_prob[regime] {
                regime = 1 - regime;
            }
            let reg = &cfg.regimes[regime];
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                let m = reg.mean_offset[j];
                x[j] = m + reg.ar[j] * (x[j] - m) + reg.noise[j] * eps;
            }
        }
        labels.push(regime);
        data.extend_from_slice(&x);
    }
    let timestamps = (0..cfg.total_steps as i64).map(|t| t * cfg.step_ms).collect();
    let values = Matrix::new(cfg.total_steps, d, data)?;
    let trace = KpiTrace::new(timestamps, values, feature_names(d))?;
    Ok((trace, labels))
}
