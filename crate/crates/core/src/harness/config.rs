use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ad::AdamConfig;
use crate::baselines::{BaselineConfig, ContinuousGrad, Estimator};
use crate::blocks::Blocks2DConfig;
use crate::error::{Error, Result};
use crate::gp::GpConfig;
use crate::hmws::HmwsConfig;
use crate::prob::ConjugateTestbed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Timeseries,
    Blocks2d,
    Testbed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hmws,
    Rws,
    Vimco,
    Reinforce,
}

impl Method {
    pub fn estimator(self) -> Option<Estimator> {
        match self {
            Method::Hmws => None,
            Method::Rws => Some(Estimator::Rws),
            Method::Vimco => Some(Estimator::Vimco),
            Method::Reinforce => Some(Estimator::Reinforce),
        }
    }
}

/// Where the training data comes from.
///
/// With `path` unset a synthetic dataset of `count` items is generated from
/// `seed`. A directory is read as written by `gen-data`; for time series a
/// plain file is ingested as a labelled CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub path: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            path: None,
            count: 100,
            seed: 0,
        }
    }
}

/// The data-generating testbed; the learner starts from a flat prior and
/// spread-out means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestbedSpec {
    pub prior: Vec<f64>,
    pub means: Vec<f64>,
    pub prior_std: f64,
    pub obs_std: f64,
}

impl Default for TestbedSpec {
    fn default() -> Self {
        TestbedSpec {
            prior: vec![0.25, 0.45, 0.3],
            means: vec![-1.0, 0.2, 1.4],
            prior_std: 0.7,
            obs_std: 0.5,
        }
    }
}

impl TestbedSpec {
    pub fn truth(&self) -> Result<ConjugateTestbed> {
        ConjugateTestbed::new(
            self.prior.clone(),
            self.means.clone(),
            self.prior_std,
            self.obs_std,
        )
    }

    pub fn initial(&self) -> Result<ConjugateTestbed> {
        let d = self.prior.len();
        let means = (0..d)
            .map(|i| {
                if d == 1 {
                    0.0
                } else {
                    -2.0 + 4.0 * i as f64 / (d - 1) as f64
                }
            })
            .collect();
        ConjugateTestbed::new(vec![1.0 / d as f64; d], means, 1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: Domain,
    pub method: Method,
    #[serde(rename = "M", default = "d_memory")]
    pub memory_size: usize,
    #[serde(rename = "N", default = "d_proposals")]
    pub proposals: usize,
    #[serde(rename = "K", default = "d_importance")]
    pub importance_samples: usize,
    #[serde(rename = "lambda", default = "d_lambda")]
    pub replay_factor: f64,
    /// Baseline particles; `K (N + M)` when unset.
    #[serde(rename = "S", default)]
    pub particles: Option<usize>,
    #[serde(default)]
    pub continuous: ContinuousGrad,
    pub iterations: u64,
    #[serde(default = "d_minibatch")]
    pub minibatch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "d_eval_size")]
    pub eval_size: usize,
    #[serde(default = "d_s_test")]
    pub s_test: usize,
    /// 0 keeps only the first and last checkpoint.
    #[serde(default)]
    pub checkpoint_interval: u64,
    pub output: PathBuf,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Worker threads; 0 uses one per core.
    #[serde(default = "d_workers")]
    pub workers: usize,
    /// When false, `wall_s` is written as 0 so metrics are byte-reproducible.
    #[serde(default = "d_true")]
    pub record_wall_clock: bool,
    /// Stop after the first iteration that ends past this many seconds.
    #[serde(default)]
    pub time_budget_s: Option<f64>,
    /// Consecutive skipped iterations tolerated before giving up.
    #[serde(default = "d_max_skips")]
    pub max_consecutive_skips: u64,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub blocks: Blocks2DConfig,
    #[serde(default)]
    pub testbed: TestbedSpec,
}

fn d_memory() -> usize {
    HmwsConfig::default().memory_size
}
fn d_proposals() -> usize {
    HmwsConfig::default().proposals
}
fn d_importance() -> usize {
    HmwsConfig::default().importance_samples
}
fn d_lambda() -> f64 {
    HmwsConfig::default().replay_factor
}
fn d_minibatch() -> usize {
    20
}
fn d_eval_interval() -> u64 {
    100
}
fn d_eval_size() -> usize {
    50
}
fn d_s_test() -> usize {
    100
}
fn d_workers() -> usize {
    1
}
fn d_true() -> bool {
    true
}
fn d_max_skips() -> u64 {
    100
}

impl RunConfig {
    /// A config with every optional field at its default.
    pub fn new(
        domain: Domain,
        method: Method,
        iterations: u64,
        output: impl Into<PathBuf>,
    ) -> Self {
        RunConfig {
            domain,
            method,
            memory_size: d_memory(),
            proposals: d_proposals(),
            importance_samples: d_importance(),
            replay_factor: d_lambda(),
            particles: None,
            continuous: ContinuousGrad::default(),
            iterations,
            minibatch: d_minibatch(),
            seed: 0,
            eval_interval: d_eval_interval(),
            eval_size: d_eval_size(),
            s_test: d_s_test(),
            checkpoint_interval: 0,
            output: output.into(),
            data: DataSpec::default(),
            adam: AdamConfig::default(),
            workers: d_workers(),
            record_wall_clock: true,
            time_budget_s: None,
            max_consecutive_skips: d_max_skips(),
            gp: GpConfig::default(),
            blocks: Blocks2DConfig::default(),
            testbed: TestbedSpec::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn hmws(&self) -> HmwsConfig {
        HmwsConfig {
            memory_size: self.memory_size,
            proposals: self.proposals,
            importance_samples: self.importance_samples,
            replay_factor: self.replay_factor,
        }
    }

    /// `S`, defaulting to the likelihood budget of the paired HMWS config.
    pub fn particles(&self) -> usize {
        self.particles.unwrap_or_else(|| self.hmws().budget())
    }

    pub fn baseline(&self) -> Option<BaselineConfig> {
        self.method.estimator().map(|method| BaselineConfig {
            method,
            particles: self.particles(),
            continuous: self.continuous,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.baseline() {
            Some(b) => b.validate()?,
            None => self.hmws().validate()?,
        }
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch must be at least 1".into()));
        }
        if self.s_test == 0 {
            return Err(Error::Config("s_test must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if self.eval_size == 0 {
            return Err(Error::Config("eval_size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is not positive",
                self.adam.lr
            )));
        }
        match self.domain {
            Domain::Blocks2d => self.blocks.validate()?,
            Domain::Testbed => {
                self.testbed.truth()?;
            }
            Domain::Timeseries => {}
        }
        Ok(())
    }
}
