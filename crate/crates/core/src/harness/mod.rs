//! Training runs: configuration, datasets, the training loop, evaluation,
//! checkpoints and plot-data export.
//!
//! A run directory holds `config.json`, `metrics.csv`, `checkpoints/iter_*`
//! and, after [`export_plots`], a `plots/` directory.

mod config;
mod domain;
mod export;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{DataSpec, Domain, Method, RunConfig, TestbedSpec};
pub use domain::{gen_data, load_timeseries, DomainModel, TESTBED_FILE, TIMESERIES_FILE};
pub use export::{
    export_plots, reconstruct_scene, ExportReport, Reconstruction, EXTRAPOLATION_FACTOR, PLOTS_DIR,
};
pub use train::{
    checkpoint_dir, eval_checkpoint, latest_checkpoint, read_metrics, train, MetricsRow, Session,
    TrainSummary, CHECKPOINTS_DIR, CONFIG_FILE, MEMORY_FILE, METRICS_FILE,
};

/// Tags separating the random streams of one `(seed, datapoint, iteration)`.
pub(crate) mod tag {
    pub const PARAMS: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const INIT: u64 = 3;
    pub const STEP: u64 = 4;
    pub const FANTASY: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const EXPORT: u64 = 7;
    pub const DATA: u64 = 8;
}

/// Stream index for draws that belong to no datapoint.
pub(crate) const GLOBAL: u64 = u64::MAX;

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-datapoint IWAE estimates with their median and quartiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub s_test: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub values: Vec<f64>,
}

impl EvalSummary {
    pub fn new(values: Vec<f64>, s_test: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySamples);
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(EvalSummary {
            s_test,
            median: quantile(&sorted, 0.5),
            q25: quantile(&sorted, 0.25),
            q75: quantile(&sorted, 0.75),
            values,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}
