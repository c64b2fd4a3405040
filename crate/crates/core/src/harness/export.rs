use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::domain::DomainModel;
use super::train::{
    checkpoint_config, latest_checkpoint, read_metrics, restore, Session, METRICS_FILE,
};
use super::{tag, Domain};
use crate::ad::{Tape, Tensor};
use crate::baselines::draw_particles;
use crate::blocks::{BlocksDataset, BlocksModel, SceneParse, SceneRecord};
use crate::error::{Error, Result};
use crate::gp::{GpModel, KernelExpr};
use crate::model::{self, HybridModel};
use crate::prob::{normalized_weights, sample_log_probs, tagged_stream, StreamRng, TestbedModel};

/// The extrapolation grid spans the observed inputs and half as much again.
pub const EXTRAPOLATION_FACTOR: f64 = 1.5;

pub const PLOTS_DIR: &str = "plots";

/// Files written by [`export_plots`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportReport {
    pub files: Vec<PathBuf>,
}

/// A candidate latent scored by importance sampling over `z_c`.
struct Scored<Z> {
    z: Z,
    log_p_hat: f64,
    /// The highest-weight continuous sample.
    zc: Vec<f64>,
}

/// `log p̂` of each discrete latent with `k` draws from `q(z_c | z_d, x)`.
fn score_entries<M: HybridModel>(
    model: &M,
    store: &crate::ad::ParamStore,
    x: &M::Obs,
    entries: &[M::Discrete],
    k: usize,
    rng: &mut StreamRng,
) -> Result<Vec<Scored<M::Discrete>>> {
    let mut out = Vec::with_capacity(entries.len());
    for z in entries {
        let mut tape = Tape::new(store);
        let enc = model.encode(&mut tape, store, x)?;
        let (mean, log_std) = model.q_continuous(&mut tape, store, enc, z)?;
        let mut lw = Vec::with_capacity(k);
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for zc in model::sample_continuous(&tape, mean, log_std, k, rng) {
            let zv = tape.constant(Tensor::vector(zc.clone()));
            let lp = model::log_joint(model, &mut tape, store, z, zv, x)?;
            let lq = model::log_q_continuous(&mut tape, mean, log_std, zv)?;
            let w = tape.value(lp).item() - tape.value(lq).item();
            let w = if w.is_nan() { f64::NEG_INFINITY } else { w };
            if best.1.is_empty() || w > best.0 {
                best = (w, zc);
            }
            lw.push(w);
        }
        out.push(Scored {
            z: z.clone(),
            log_p_hat: crate::ad::log_sum_exp(&lw) - (k as f64).ln(),
            zc: best.1,
        });
    }
    Ok(out)
}

/// One latent for datapoint `d`: the best memory entry when a memory exists,
/// otherwise a draw from `S` recognition particles resampled by importance
/// weight.
fn posterior_pick<M: DomainModel>(s: &Session<M>, d: usize) -> Result<(M::Discrete, Vec<f64>)> {
    let x = &s.data[d];
    let mut rng = tagged_stream(s.cfg.seed, d as u64, s.iteration, tag::EXPORT);
    let k = s.cfg.s_test;
    if let Some(mem) = &s.memory[d] {
        let scored = score_entries(&s.model, &s.store, x, &mem.entries, k, &mut rng)?;
        let best = scored
            .into_iter()
            .max_by(|a, b| a.log_p_hat.total_cmp(&b.log_p_hat))
            .ok_or(Error::EmptySamples)?;
        return Ok((best.z, best.zc));
    }
    let particles = draw_particles(&s.model, &s.store, x, s.cfg.particles(), &mut rng)?;
    let mut tape = Tape::new(&s.store);
    let enc = s.model.encode(&mut tape, &s.store, x)?;
    let mut lw = Vec::with_capacity(particles.len());
    let mut zcs = Vec::with_capacity(particles.len());
    for p in &particles {
        let lqd = s.model.log_q_discrete(&mut tape, &s.store, enc, &p.z)?;
        let (mean, log_std) = s.model.q_continuous(&mut tape, &s.store, enc, &p.z)?;
        let m = tape.value(mean).data().to_vec();
        let ls = tape.value(log_std).data().to_vec();
        let zc: Vec<f64> = m
            .iter()
            .zip(&ls)
            .zip(&p.eps)
            .map(|((m, l), e)| m + l.exp() * e)
            .collect();
        let zv = tape.constant(Tensor::vector(zc.clone()));
        let lp = model::log_joint(&s.model, &mut tape, &s.store, &p.z, zv, x)?;
        let lqc = model::log_q_continuous(&mut tape, mean, log_std, zv)?;
        let w = tape.value(lp).item() - tape.value(lqd).item() - tape.value(lqc).item();
        lw.push(if w.is_nan() { f64::NEG_INFINITY } else { w });
        zcs.push(zc);
    }
    let i = match normalized_weights(&lw) {
        Ok(w) => sample_log_probs(&w.iter().map(|w| w.ln()).collect::<Vec<_>>(), &mut rng),
        Err(_) => 0,
    };
    Ok((particles[i].z.clone(), zcs.swap_remove(i)))
}

#[derive(Serialize)]
struct MemoryEntryJson {
    expr: String,
    description: String,
    omega: f64,
    log_p_hat: f64,
    params: Vec<f64>,
}

#[derive(Serialize)]
struct MemoryJson {
    datapoint: usize,
    entries: Vec<MemoryEntryJson>,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ExtrapolationRow {
    t: f64,
    mean: f64,
    lo2sd: f64,
    hi2sd: f64,
    sample: f64,
}

fn export_timeseries(s: &Session<GpModel>, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let t = s.model.inputs();
    let n = t.len();
    let step = t[1] - t[0];
    let grid: Vec<f64> = (0..(n as f64 * EXTRAPOLATION_FACTOR).round() as usize)
        .map(|i| t[0] + i as f64 * step)
        .collect();
    for d in s.eval_indices() {
        let x = &s.data[d];
        let (z, zc) = posterior_pick(s, d)?;
        let mut rng = tagged_stream(s.cfg.seed, d as u64, s.iteration, tag::EXPORT);
        let pred = s.model.predict(&s.store, &z, &zc, x, &grid, &mut rng)?;
        let path = dir.join(format!("extrapolation_{d:04}.csv"));
        write_csv(
            &path,
            grid.iter().enumerate().map(|(i, &t)| {
                let sd = pred.var[i].max(0.0).sqrt();
                ExtrapolationRow {
                    t,
                    mean: pred.mean[i],
                    lo2sd: pred.mean[i] - 2.0 * sd,
                    hi2sd: pred.mean[i] + 2.0 * sd,
                    sample: pred.sample[i],
                }
            }),
        )?;
        files.push(path);

        if let Some(mem) = &s.memory[d] {
            let scored =
                score_entries(&s.model, &s.store, x, &mem.entries, s.cfg.s_test, &mut rng)?;
            let lp: Vec<f64> = scored.iter().map(|e| e.log_p_hat).collect();
            let omega = normalized_weights(&lp)?;
            let mut entries: Vec<MemoryEntryJson> = scored
                .iter()
                .zip(omega)
                .map(|(e, omega): (&Scored<KernelExpr>, f64)| MemoryEntryJson {
                    expr: e.z.prefix(),
                    description: s.model.describe(&e.z, &e.zc),
                    omega,
                    log_p_hat: e.log_p_hat,
                    params: e.zc.clone(),
                })
                .collect();
            entries.sort_by(|a, b| b.omega.total_cmp(&a.omega));
            let path = dir.join(format!("memory_{d:04}.json"));
            write_json(
                &path,
                &MemoryJson {
                    datapoint: d,
                    entries,
                },
            )?;
            files.push(path);
        }
    }
    Ok(())
}

/// A scene explanation rendered back to pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub parse: SceneParse,
    pub positions: Vec<f64>,
    pub image: Vec<f64>,
    /// Mean squared error per channel value against the observation.
    pub mse: f64,
}

/// Renders the best explanation of scene `d`: memory entries (or `S`
/// recognition particles without a memory) placed at the recognition mean and
/// ranked by the joint density.
pub fn reconstruct_scene(s: &Session<BlocksModel>, d: usize) -> Result<Reconstruction> {
    let x = &s.data[d];
    let candidates = match &s.memory[d] {
        Some(m) => m.entries.clone(),
        None => {
            let mut rng = tagged_stream(s.cfg.seed, d as u64, s.iteration, tag::EXPORT);
            draw_particles(&s.model, &s.store, x, s.cfg.particles(), &mut rng)?
                .into_iter()
                .map(|p| p.z)
                .collect()
        }
    };
    let mut tape = Tape::new(&s.store);
    let enc = s.model.encode(&mut tape, &s.store, x)?;
    let mut best: Option<(f64, SceneParse, Vec<f64>)> = None;
    for z in candidates {
        let (mean, _) = s.model.q_continuous(&mut tape, &s.store, enc, &z)?;
        let zc = tape.value(mean).data().to_vec();
        let zv = tape.constant(Tensor::vector(zc.clone()));
        let lp = model::log_joint(&s.model, &mut tape, &s.store, &z, zv, x)?;
        let lp = tape.value(lp).item();
        if best.as_ref().is_none_or(|b| lp > b.0) {
            best = Some((lp, z, zc));
        }
    }
    let (_, parse, positions) = best.ok_or(Error::EmptySamples)?;
    let image = s.model.render(&s.store, &parse, &positions)?;
    let mse = image
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    Ok(Reconstruction {
        parse,
        positions,
        image,
        mse,
    })
}

#[derive(Serialize)]
struct ReconstructionRow {
    datapoint: usize,
    blocks: usize,
    mse: f64,
}

fn export_blocks(s: &Session<BlocksModel>, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let cfg = s.model.config();
    let mut ds = BlocksDataset {
        height: cfg.height,
        width: cfg.width,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for d in s.eval_indices() {
        let r = reconstruct_scene(s, d)?;
        rows.push(ReconstructionRow {
            datapoint: d,
            blocks: r.parse.num_blocks(),
            mse: r.mse,
        });
        ds.images.push(r.image);
        ds.scenes.push(SceneRecord {
            parse: r.parse,
            positions: r.positions,
        });
    }
    let path = dir.join("reconstructions.csv");
    write_csv(&path, rows)?;
    files.push(path);
    let path = dir.join("reconstructions");
    ds.save(&path)?;
    files.push(path);
    let prims = s.model.primitives(&s.store);
    let path = dir.join("primitives.json");
    write_json(
        &path,
        &serde_json::json!({ "sizes": prims.sizes, "colors": prims.colors }),
    )?;
    files.push(path);
    Ok(())
}

fn export_testbed(s: &Session<TestbedModel>, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let tb = s.model.testbed(&s.store)?;
    let path = dir.join("testbed.json");
    write_json(
        &path,
        &serde_json::json!({
            "prior": tb.prior,
            "means": tb.means,
            "prior_std": tb.prior_std,
            "obs_std": tb.obs_std,
        }),
    )?;
    files.push(path);
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    iteration: u64,
    median: f64,
    q25: f64,
    q75: f64,
}

/// Writes plot data for a run directory into `<run>/plots`.
pub fn export_plots(run: &Path) -> Result<ExportReport> {
    let dir = run.join(PLOTS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    let rows = read_metrics(&run.join(METRICS_FILE))?;
    let path = dir.join("learning_curve.csv");
    write_csv(
        &path,
        rows.iter().map(|r| CurveRow {
            iteration: r.iteration,
            median: r.logp_median,
            q25: r.logp_q25,
            q75: r.logp_q75,
        }),
    )?;
    files.push(path);

    let ckpt = latest_checkpoint(run)?;
    match checkpoint_config(&ckpt)?.domain {
        Domain::Timeseries => export_timeseries(&restore(&ckpt, None)?, &dir, &mut files)?,
        Domain::Blocks2d => export_blocks(&restore(&ckpt, None)?, &dir, &mut files)?,
        Domain::Testbed => export_testbed(&restore(&ckpt, None)?, &dir, &mut files)?,
    }
    Ok(ExportReport { files })
}
