//! Time-series datasets: synthetic generation and CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::grammar::{KernelExpr, Token};
use super::kernel::{kernel_matrix, softplus_inv};
use super::likelihood::jittered_cholesky;
use crate::error::{Error, Result};

/// Series length used throughout.
pub const SERIES_LEN: usize = 128;
/// Per-class cap applied by [`ingest_timeseries`].
pub const MAX_PER_CLASS: usize = 5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeseriesDataset {
    pub labels: Vec<String>,
    pub series: Vec<Vec<f64>>,
}

impl TimeseriesDataset {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// One row per series: label followed by the values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for (label, s) in self.labels.iter().zip(&self.series) {
            let mut row = vec![label.clone()];
            row.extend(s.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`write_csv`](Self::write_csv) without any
    /// preprocessing; every row must already hold `SERIES_LEN` values.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows = read_rows(path)?;
        let mut out = TimeseriesDataset::default();
        for row in rows {
            let values = row
                .values
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if values.len() != SERIES_LEN {
                return Err(Error::Data(format!(
                    "{} line {}: expected {SERIES_LEN} values, found {}",
                    path.display(),
                    row.line,
                    values.len()
                )));
            }
            out.labels.push(row.label);
            out.series.push(values);
        }
        Ok(out)
    }
}

/// Mean 0, population variance 1; `None` for a constant series.
pub fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * (1.0 + mean.abs())) {
        return None;
    }
    Some(x.iter().map(|v| (v - mean) / sd).collect())
}

/// Linear interpolation of `x` onto `len` evenly spaced points.
pub fn resample(x: &[f64], len: usize) -> Vec<f64> {
    if x.len() == 1 {
        return vec![x[0]; len];
    }
    let scale = (x.len() - 1) as f64 / (len - 1) as f64;
    (0..len)
        .map(|i| {
            let pos = i as f64 * scale;
            let j = (pos.floor() as usize).min(x.len() - 2);
            let f = pos - j as f64;
            x[j] * (1.0 - f) + x[j + 1] * f
        })
        .collect()
}

/// Centered window of length `len`.
pub fn center_crop(x: &[f64], len: usize) -> &[f64] {
    let start = (x.len() - len) / 2;
    &x[start..start + len]
}

struct Row {
    line: usize,
    label: String,
    values: std::result::Result<Vec<f64>, String>,
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let label = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(1)
            .filter(|c| !c.is_empty())
            .enumerate()
            .map(|(i, c)| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("line {line}: cell {} `{c}` is not a number", i + 2))
            })
            .collect();
        rows.push(Row {
            line,
            label,
            values,
        });
    }
    Ok(rows)
}

/// Rows dropped or altered during ingestion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    /// `(line, reason)`.
    pub rejected: Vec<(usize, String)>,
    /// Lines that were shorter than the target and were interpolated.
    pub resampled: Vec<usize>,
}

/// Reads `label, v₁, v₂, …` rows, crops or interpolates to [`SERIES_LEN`],
/// standardizes, and keeps at most [`MAX_PER_CLASS`] series per label chosen
/// by a `seed`-determined shuffle.
pub fn ingest_timeseries(path: &Path, seed: u64) -> Result<(TimeseriesDataset, IngestReport)> {
    let mut report = IngestReport::default();
    let mut classes: BTreeMap<String, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    let mut order = Vec::new();
    for row in read_rows(path)? {
        let values = match row.values {
            Ok(v) if v.is_empty() => {
                report.rejected.push((row.line, "no values".into()));
                continue;
            }
            Ok(v) => v,
            Err(e) => {
                log::warn!("{}: rejected {e}", path.display());
                report.rejected.push((row.line, e));
                continue;
            }
        };
        let fixed = if values.len() >= SERIES_LEN {
            center_crop(&values, SERIES_LEN).to_vec()
        } else {
            log::warn!(
                "{} line {}: {} values, interpolated to {SERIES_LEN}",
                path.display(),
                row.line,
                values.len()
            );
            report.resampled.push(row.line);
            resample(&values, SERIES_LEN)
        };
        let Some(s) = standardize(&fixed) else {
            log::warn!(
                "{} line {}: constant series rejected",
                path.display(),
                row.line
            );
            report.rejected.push((row.line, "constant series".into()));
            continue;
        };
        if !classes.contains_key(&row.label) {
            order.push(row.label.clone());
        }
        classes.entry(row.label).or_default().push((row.line, s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TimeseriesDataset::default();
    for label in order {
        let mut members = classes.remove(&label).unwrap_or_default();
        members.shuffle(&mut rng);
        members.truncate(MAX_PER_CLASS);
        members.sort_by_key(|(line, _)| *line);
        for (_, s) in members {
            out.labels.push(label.clone());
            out.series.push(s);
        }
    }
    Ok((out, report))
}

/// Ground-truth structures used by [`synth_timeseries`].
pub const SYNTH_KERNELS: [&str; 4] = ["SE", "PLUS PER_5 WN", "TIMES SE PER_5", "PLUS LIN PER_3"];

fn synth_params<R: Rng + ?Sized>(expr: &KernelExpr, rng: &mut R) -> Vec<f64> {
    let mut raw = Vec::new();
    for t in expr.tokens() {
        match t {
            Token::SquaredExp => {
                raw.extend([softplus_inv(1.0), softplus_inv(rng.random_range(0.05..0.3))])
            }
            Token::Periodic(_) => raw.extend([
                softplus_inv(1.0),
                softplus_inv(rng.random_range(0.1..0.4)),
                softplus_inv(rng.random_range(0.5..1.5)),
            ]),
            Token::WhiteNoise => raw.push(softplus_inv(0.2)),
            Token::Linear => raw.extend([
                softplus_inv(rng.random_range(0.5..2.0)),
                rng.random_range(0.0..1.0),
            ]),
            Token::Const => raw.push(softplus_inv(0.5)),
            Token::Plus | Token::Times => {}
        }
    }
    raw
}

/// Draws a path of length [`SERIES_LEN`] from `N(0, K + 0.01·I)` and standardizes it.
pub fn sample_path<R: Rng + ?Sized>(
    expr: &KernelExpr,
    raw: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let t: Vec<f64> = (0..SERIES_LEN)
        .map(|i| i as f64 / (SERIES_LEN - 1) as f64)
        .collect();
    let mut k = kernel_matrix(expr, raw, &t, &t, false).value;
    for i in 0..SERIES_LEN {
        k[(i, i)] += 0.01;
    }
    let (c, _) = jittered_cholesky(&k)
        .ok_or_else(|| Error::Data("synthetic kernel is not positive definite".into()))?;
    let eps = DVector::from_iterator(
        SERIES_LEN,
        (0..SERIES_LEN).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    let y: Vec<f64> = (c.l() * eps).iter().copied().collect();
    standardize(&y).ok_or_else(|| Error::Data("synthetic path is constant".into()))
}

/// `count` standardized series cycling through [`SYNTH_KERNELS`] with
/// randomized parameters; labels hold the generating structure.
pub fn synth_timeseries(seed: u64, count: usize) -> Result<TimeseriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exprs: Vec<KernelExpr> = SYNTH_KERNELS
        .iter()
        .map(|s| KernelExpr::parse_prefix(s, 9))
        .collect::<Result<_>>()?;
    let mut out = TimeseriesDataset::default();
    for i in 0..count {
        let e = &exprs[i % exprs.len()];
        let raw = synth_params(e, &mut rng);
        out.series.push(sample_path(e, &raw, &mut rng)?);
        out.labels.push(e.prefix());
    }
    Ok(out)
}
