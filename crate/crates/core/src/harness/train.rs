use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSpec, Domain, RunConfig};
use super::domain::DomainModel;
use super::{tag, EvalSummary, GLOBAL};
use crate::ad::checkpoint;
use crate::ad::{adam_step, AdamState, Gradients, ParamStore};
use crate::baselines::{baseline_step, iwae_log_marginal};
use crate::blocks::BlocksModel;
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::hmws::{fantasy_grad, init_memory, replay_step, Memory};
use crate::prob::{tagged_stream, TestbedModel};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const MEMORY_FILE: &str = "memory.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub wall_s: f64,
    pub logp_median: f64,
    pub logp_q25: f64,
    pub logp_q75: f64,
    pub lik_evals: u64,
    pub skips: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub last: MetricsRow,
    pub skipped_iterations: u64,
}

#[derive(Serialize, Deserialize)]
struct MemoryRecord {
    degenerate: bool,
    /// Hex-encoded canonical keys.
    keys: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MemoryFile {
    memory_size: usize,
    datapoints: Vec<Option<MemoryRecord>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    iteration: u64,
    lik_evals: u64,
    skips: u64,
    skipped_iterations: u64,
    wall_s: f64,
    config: RunConfig,
}

struct PointStep<Z> {
    gen: Gradients,
    rec: Gradients,
    memory: Option<Memory<Z>>,
    skipped: bool,
}

/// A training run in memory: model, parameters, optimizer, data and the
/// per-datapoint memories.
pub struct Session<M: DomainModel> {
    pub cfg: RunConfig,
    pub model: M,
    pub store: ParamStore,
    pub adam: AdamState,
    pub data: Vec<M::Obs>,
    /// `None` until the datapoint first appears in a minibatch.
    pub memory: Vec<Option<Memory<M::Discrete>>>,
    /// Completed iterations.
    pub iteration: u64,
    /// Likelihood evaluations spent on training, excluding evaluation.
    pub lik_evals: u64,
    /// Datapoint steps skipped for degenerate weights or non-finite gradients.
    pub skips: u64,
    pub skipped_iterations: u64,
    wall_offset: f64,
    pool: rayon::ThreadPool,
}

impl<M: DomainModel> Session<M> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let data = M::load_data(&cfg, &cfg.data)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: RunConfig, data: Vec<M::Obs>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("the dataset is empty".into()));
        }
        let mut rng = tagged_stream(cfg.seed, GLOBAL, 0, tag::PARAMS);
        let (model, store) = M::build(&cfg, &mut rng)?;
        let adam = AdamState::new(&store, cfg.adam);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let memory = (0..data.len()).map(|_| None).collect();
        Ok(Session {
            cfg,
            model,
            store,
            adam,
            data,
            memory,
            iteration: 0,
            lik_evals: 0,
            skips: 0,
            skipped_iterations: 0,
            wall_offset: 0.0,
            pool,
        })
    }

    /// Restores parameters, optimizer, counters and memories from `dir`.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let (adam, manifest) = checkpoint::load(dir, &mut self.store)?;
        let extra: CheckpointExtra = serde_json::from_value(manifest.extra)
            .map_err(|e| Error::Checkpoint(format!("{}: bad run metadata: {e}", dir.display())))?;
        if extra.config.seed != self.cfg.seed {
            log::warn!(
                "checkpoint was written with seed {}, continuing with seed {}",
                extra.config.seed,
                self.cfg.seed
            );
        }
        let path = dir.join(MEMORY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: MemoryFile = serde_json::from_str(&text)?;
        if file.datapoints.len() != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "memory covers {} datapoints, the dataset has {}",
                file.datapoints.len(),
                self.data.len()
            )));
        }
        let mut memory = Vec::with_capacity(file.datapoints.len());
        for (d, rec) in file.datapoints.into_iter().enumerate() {
            let Some(rec) = rec else {
                memory.push(None);
                continue;
            };
            let keys = rec
                .keys
                .iter()
                .map(hex::decode)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Checkpoint(format!("memory of datapoint {d}: {e}")))?;
            let mut m =
                Memory::from_keys(&self.model, &keys, file.memory_size).ok_or_else(|| {
                    Error::Checkpoint(format!("memory of datapoint {d} does not decode"))
                })?;
            m.degenerate = rec.degenerate;
            memory.push(Some(m));
        }
        self.adam = adam;
        self.memory = memory;
        self.iteration = extra.iteration;
        self.lik_evals = extra.lik_evals;
        self.skips = extra.skips;
        self.skipped_iterations = extra.skipped_iterations;
        self.wall_offset = extra.wall_s;
        Ok(())
    }

    pub fn save_checkpoint(&self, dir: &Path, wall_s: f64) -> Result<()> {
        let extra = CheckpointExtra {
            iteration: self.iteration,
            lik_evals: self.lik_evals,
            skips: self.skips,
            skipped_iterations: self.skipped_iterations,
            wall_s: if self.cfg.record_wall_clock {
                wall_s
            } else {
                0.0
            },
            config: self.cfg.clone(),
        };
        checkpoint::save(dir, &self.store, &self.adam, serde_json::to_value(extra)?)?;
        let file = MemoryFile {
            memory_size: self.cfg.memory_size,
            datapoints: self
                .memory
                .iter()
                .map(|m| {
                    m.as_ref().map(|m| MemoryRecord {
                        degenerate: m.degenerate,
                        keys: m.keys(&self.model).iter().map(hex::encode).collect(),
                    })
                })
                .collect(),
        };
        let path = dir.join(MEMORY_FILE);
        let json = serde_json::to_string(&file)? + "\n";
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// The sorted minibatch of iteration `it`.
    pub fn batch(&self, it: u64) -> Vec<usize> {
        let n = self.data.len();
        let mut rng = tagged_stream(self.cfg.seed, GLOBAL, it, tag::BATCH);
        let mut b = index::sample(&mut rng, n, self.cfg.minibatch.min(n)).into_vec();
        b.sort_unstable();
        b
    }

    fn point_step(&self, d: usize, it: u64) -> Result<PointStep<M::Discrete>> {
        let x = &self.data[d];
        let seed = self.cfg.seed;
        if let Some(b) = self.cfg.baseline() {
            let out = baseline_step(
                &self.model,
                &self.store,
                x,
                &b,
                &mut tagged_stream(seed, d as u64, it, tag::STEP),
            )?;
            return Ok(PointStep {
                gen: out.gen,
                rec: out.rec,
                memory: None,
                skipped: out.skipped,
            });
        }
        let hc = self.cfg.hmws();
        let mem = match &self.memory[d] {
            Some(m) => m.clone(),
            None => {
                let mut rng = tagged_stream(seed, d as u64, it, tag::INIT);
                init_memory(&self.model, &self.store, x, hc.memory_size, &mut rng)?
            }
        };
        let out = replay_step(
            &self.model,
            &self.store,
            x,
            &mem,
            &hc,
            &mut tagged_stream(seed, d as u64, it, tag::STEP),
        )?;
        Ok(PointStep {
            gen: out.gen,
            rec: out.rec,
            memory: Some(out.memory),
            skipped: out.skipped,
        })
    }

    /// One optimizer iteration over a fresh minibatch.
    ///
    /// Datapoint gradients are averaged in datapoint order. For HMWS the
    /// fantasy term is estimated once per iteration from as many model samples
    /// as the minibatch holds. Returns false when the aggregate gradient was
    /// non-finite and the iteration was skipped.
    pub fn step(&mut self) -> Result<bool> {
        let it = self.iteration;
        let batch = self.batch(it);
        let lik0 = self.model.counters().likelihood();
        let outs: Vec<Result<PointStep<M::Discrete>>> = self
            .pool
            .install(|| batch.par_iter().map(|&d| self.point_step(d, it)).collect());

        let scale = 1.0 / batch.len() as f64;
        let mut gen = Gradients::zeros(&self.store);
        let mut rec = Gradients::zeros(&self.store);
        let mut updates = Vec::with_capacity(batch.len());
        let mut skips = 0;
        for (&d, out) in batch.iter().zip(outs) {
            let out = out?;
            gen.add_scaled(scale, &out.gen);
            rec.add_scaled(scale, &out.rec);
            skips += out.skipped as u64;
            if let Some(m) = out.memory {
                updates.push((d, m));
            }
        }
        let lambda = self.cfg.replay_factor;
        if self.cfg.method == super::Method::Hmws && lambda < 1.0 {
            let mut rng = tagged_stream(self.cfg.seed, GLOBAL, it, tag::FANTASY);
            let f = fantasy_grad(&self.model, &self.store, batch.len(), &mut rng)?;
            rec.add_scaled(1.0 - lambda, &f);
        }
        gen.add_scaled(1.0, &rec);

        self.iteration += 1;
        self.lik_evals += self.model.counters().likelihood() - lik0;
        self.skips += skips;
        if !gen.is_finite() {
            log::warn!("iteration {it}: non-finite aggregate gradient, skipped");
            self.skipped_iterations += 1;
            return Ok(false);
        }
        adam_step(&mut self.store, &gen, &mut self.adam);
        for (d, m) in updates {
            self.memory[d] = Some(m);
        }
        Ok(true)
    }

    /// IWAE estimates for the given datapoints; likelihood counters are left
    /// untouched.
    pub fn evaluate_on(&self, indices: &[usize], s_test: usize) -> Result<EvalSummary> {
        let c = self.model.counters();
        let (l, p) = (c.likelihood(), c.discrete_prior());
        let it = self.iteration;
        let seed = self.cfg.seed;
        let values: Vec<Result<f64>> = self.pool.install(|| {
            indices
                .par_iter()
                .map(|&d| {
                    let mut rng = tagged_stream(seed, d as u64, it, tag::EVAL);
                    iwae_log_marginal(&self.model, &self.store, &self.data[d], s_test, &mut rng)
                })
                .collect()
        });
        c.set(l, p);
        EvalSummary::new(values.into_iter().collect::<Result<_>>()?, s_test)
    }

    /// The held-in evaluation subset: the first `eval_size` datapoints.
    pub fn eval_indices(&self) -> Vec<usize> {
        (0..self.cfg.eval_size.min(self.data.len())).collect()
    }

    pub fn evaluate(&self) -> Result<EvalSummary> {
        self.evaluate_on(&self.eval_indices(), self.cfg.s_test)
    }

    fn row(&self, wall_s: f64) -> Result<MetricsRow> {
        let e = self.evaluate()?;
        Ok(MetricsRow {
            iteration: self.iteration,
            wall_s: if self.cfg.record_wall_clock {
                wall_s
            } else {
                0.0
            },
            logp_median: e.median,
            logp_q25: e.q25,
            logp_q75: e.q75,
            lik_evals: self.lik_evals,
            skips: self.skips,
        })
    }

    /// Trains to `cfg.iterations`, writing metrics and checkpoints under
    /// `cfg.output`.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let out = self.cfg.output.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        self.cfg.save(&out.join(CONFIG_FILE))?;
        let metrics_path = out.join(METRICS_FILE);
        let mut rows = if self.iteration > 0 && metrics_path.exists() {
            let mut r = read_metrics(&metrics_path)?;
            r.retain(|row| row.iteration <= self.iteration);
            r
        } else {
            Vec::new()
        };
        let start = Instant::now();
        let wall = |offset: f64| offset + start.elapsed().as_secs_f64();
        if rows.last().is_none_or(|r| r.iteration < self.iteration) {
            rows.push(self.row(wall(self.wall_offset))?);
            write_metrics(&metrics_path, &rows)?;
        }
        if self.iteration == 0 {
            self.save_checkpoint(&checkpoint_dir(&out, 0), 0.0)?;
        }

        let mut consecutive = 0;
        while self.iteration < self.cfg.iterations {
            if self.step()? {
                consecutive = 0;
            } else {
                consecutive += 1;
                if consecutive > self.cfg.max_consecutive_skips {
                    return Err(Error::NonFinite { op: "training" });
                }
            }
            let it = self.iteration;
            let now = wall(self.wall_offset);
            let out_of_time = self.cfg.time_budget_s.is_some_and(|b| now >= b);
            let last = it == self.cfg.iterations || out_of_time;
            if it % self.cfg.eval_interval == 0 || last {
                rows.push(self.row(now)?);
                write_metrics(&metrics_path, &rows)?;
                log::info!(
                    "iteration {it}: median log p {:.4}",
                    rows[rows.len() - 1].logp_median
                );
            }
            let every = self.cfg.checkpoint_interval;
            if (every > 0 && it % every == 0) || last {
                self.save_checkpoint(&checkpoint_dir(&out, it), now)?;
            }
            if out_of_time {
                log::info!("time budget reached after {it} iterations");
                break;
            }
        }
        let last = rows
            .last()
            .cloned()
            .ok_or_else(|| Error::Data(format!("{} holds no rows", metrics_path.display())))?;
        Ok(TrainSummary {
            iterations: self.iteration,
            last,
            skipped_iterations: self.skipped_iterations,
        })
    }
}

pub fn checkpoint_dir(run: &Path, iteration: u64) -> PathBuf {
    run.join(CHECKPOINTS_DIR)
        .join(format!("iter_{iteration:08}"))
}

/// The checkpoint with the highest iteration in a run directory.
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = run.join(CHECKPOINTS_DIR);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("iter_"))
        .collect();
    names.sort();
    names
        .pop()
        .map(|n| dir.join(n))
        .ok_or_else(|| Error::Data(format!("{} holds no checkpoints", dir.display())))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the run configuration stored in a checkpoint.
pub(crate) fn checkpoint_config(dir: &Path) -> Result<RunConfig> {
    let manifest = checkpoint::read_manifest(dir)?;
    let extra: CheckpointExtra = serde_json::from_value(manifest.extra)
        .map_err(|e| Error::Checkpoint(format!("{}: bad run metadata: {e}", dir.display())))?;
    Ok(extra.config)
}

/// Restores a session from a checkpoint, optionally over another dataset.
pub(crate) fn restore<M: DomainModel>(dir: &Path, data: Option<&DataSpec>) -> Result<Session<M>> {
    let cfg = checkpoint_config(dir)?;
    let spec = data.cloned().unwrap_or_else(|| cfg.data.clone());
    let values = M::load_data(&cfg, &spec)?;
    let mut s = Session::<M>::with_data(cfg.clone(), M::load_data(&cfg, &cfg.data)?)?;
    s.load_checkpoint(dir)?;
    if data.is_some() {
        s.memory = (0..values.len()).map(|_| None).collect();
        s.data = values;
    }
    Ok(s)
}

fn train_with<M: DomainModel>(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let mut s = Session::<M>::new(cfg.clone())?;
    if let Some(dir) = resume {
        s.load_checkpoint(dir)?;
    }
    s.run()
}

/// Runs training, optionally continuing from a checkpoint.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    match cfg.domain {
        Domain::Timeseries => train_with::<GpModel>(cfg, resume),
        Domain::Blocks2d => train_with::<BlocksModel>(cfg, resume),
        Domain::Testbed => train_with::<TestbedModel>(cfg, resume),
    }
}

fn eval_with<M: DomainModel>(
    dir: &Path,
    data: Option<&DataSpec>,
    s_test: usize,
) -> Result<EvalSummary> {
    let s = restore::<M>(dir, data)?;
    let all: Vec<usize> = (0..s.data.len()).collect();
    s.evaluate_on(&all, s_test)
}

/// IWAE evaluation of every datapoint under a checkpoint.
///
/// `data` defaults to the training data recorded in the checkpoint.
pub fn eval_checkpoint(dir: &Path, data: Option<&Path>, s_test: usize) -> Result<EvalSummary> {
    if s_test == 0 {
        return Err(Error::Config("s_test must be at least 1".into()));
    }
    let cfg = checkpoint_config(dir)?;
    let spec = data.map(|p| DataSpec {
        path: Some(p.to_path_buf()),
        ..cfg.data.clone()
    });
    match cfg.domain {
        Domain::Timeseries => eval_with::<GpModel>(dir, spec.as_ref(), s_test),
        Domain::Blocks2d => eval_with::<BlocksModel>(dir, spec.as_ref(), s_test),
        Domain::Testbed => eval_with::<TestbedModel>(dir, spec.as_ref(), s_test),
    }
}
