use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DataSpec, Domain, RunConfig, TestbedSpec};
use super::{tag, GLOBAL};
use crate::ad::ParamStore;
use crate::blocks::{synth_scenes, Blocks2DConfig, BlocksDataset, BlocksModel};
use crate::error::{Error, Result};
use crate::gp::{ingest_timeseries, synth_timeseries, GpModel, TimeseriesDataset};
use crate::model::HybridModel;
use crate::prob::{tagged_stream, StreamRng, TestbedModel};

pub const TIMESERIES_FILE: &str = "series.csv";
pub const TESTBED_FILE: &str = "testbed.json";

#[derive(Serialize, Deserialize)]
struct TestbedData {
    values: Vec<f64>,
}

/// A model family the harness can train.
pub trait DomainModel: HybridModel + Sized {
    /// Fresh model and parameters.
    fn build(cfg: &RunConfig, rng: &mut StreamRng) -> Result<(Self, ParamStore)>;

    fn load_data(cfg: &RunConfig, spec: &DataSpec) -> Result<Vec<Self::Obs>>;
}

impl DomainModel for GpModel {
    fn build(cfg: &RunConfig, rng: &mut StreamRng) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = GpModel::new(cfg.gp.clone(), &mut store, rng)?;
        Ok((model, store))
    }

    fn load_data(cfg: &RunConfig, spec: &DataSpec) -> Result<Vec<Vec<f64>>> {
        let ds = load_timeseries(spec)?;
        let n = cfg.gp.num_points;
        if let Some(i) = ds.series.iter().position(|s| s.len() != n) {
            return Err(Error::Data(format!(
                "series {i} has {} points, the model expects {n}",
                ds.series[i].len()
            )));
        }
        Ok(ds.series)
    }
}

/// The time-series dataset described by `spec`.
pub fn load_timeseries(spec: &DataSpec) -> Result<TimeseriesDataset> {
    let Some(path) = &spec.path else {
        return synth_timeseries(spec.seed, spec.count);
    };
    if path.is_dir() {
        return TimeseriesDataset::read_csv(&path.join(TIMESERIES_FILE));
    }
    let (ds, report) = ingest_timeseries(path, spec.seed)?;
    for (line, reason) in &report.rejected {
        log::warn!("{}:{line}: row rejected: {reason}", path.display());
    }
    for line in &report.resampled {
        log::warn!("{}:{line}: short row resampled", path.display());
    }
    Ok(ds)
}

impl DomainModel for BlocksModel {
    fn build(cfg: &RunConfig, rng: &mut StreamRng) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = BlocksModel::new(cfg.blocks.clone(), &mut store, rng)?;
        Ok((model, store))
    }

    fn load_data(cfg: &RunConfig, spec: &DataSpec) -> Result<Vec<Vec<f64>>> {
        let b = &cfg.blocks;
        let ds = match &spec.path {
            None => synth_scenes(b, spec.seed, spec.count)?,
            Some(p) => BlocksDataset::load(p)?,
        };
        if ds.height != b.height || ds.width != b.width {
            return Err(Error::Data(format!(
                "images are {}x{}, the model expects {}x{}",
                ds.height, ds.width, b.height, b.width
            )));
        }
        Ok(ds.images)
    }
}

impl DomainModel for TestbedModel {
    fn build(cfg: &RunConfig, _rng: &mut StreamRng) -> Result<(Self, ParamStore)> {
        let init = cfg.testbed.initial()?;
        let model = TestbedModel::new(init.arity());
        let store = model.init_store(&init)?;
        Ok((model, store))
    }

    fn load_data(cfg: &RunConfig, spec: &DataSpec) -> Result<Vec<f64>> {
        match &spec.path {
            None => testbed_values(&cfg.testbed, spec.seed, spec.count),
            Some(p) => {
                let path = p.join(TESTBED_FILE);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let data: TestbedData = serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                if let Some(v) = data.values.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "{}: non-finite value {v}",
                        path.display()
                    )));
                }
                Ok(data.values)
            }
        }
    }
}

fn testbed_values(spec: &TestbedSpec, seed: u64, count: usize) -> Result<Vec<f64>> {
    let tb = spec.truth()?;
    let mut rng = tagged_stream(seed, GLOBAL, 0, tag::DATA);
    Ok((0..count).map(|_| tb.sample(&mut rng).2).collect())
}

/// Writes a synthetic dataset of `count` items to `out`; returns the count.
pub fn gen_data(
    domain: Domain,
    seed: u64,
    count: usize,
    out: &Path,
    blocks: &Blocks2DConfig,
    testbed: &TestbedSpec,
) -> Result<usize> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match domain {
        Domain::Timeseries => {
            let ds = synth_timeseries(seed, count)?;
            ds.write_csv(&out.join(TIMESERIES_FILE))?;
            Ok(ds.len())
        }
        Domain::Blocks2d => {
            let ds = synth_scenes(blocks, seed, count)?;
            ds.save(out)?;
            Ok(ds.len())
        }
        Domain::Testbed => {
            let values = testbed_values(testbed, seed, count)?;
            let path = out.join(TESTBED_FILE);
            let json = serde_json::to_string_pretty(&TestbedData { values })?;
            fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
            Ok(count)
        }
    }
}
