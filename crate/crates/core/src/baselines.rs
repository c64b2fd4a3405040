//! Comparison estimators with `S` particles from the recognition model, and the
//! importance-weighted evaluation bound.
//!
//! Every particle costs exactly one likelihood evaluation, so a baseline with
//! `S = K (N + M)` matches the budget of an HMWS iteration.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad::{log_sum_exp, Gradients, ParamStore, Role, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{self, HybridModel};
use crate::prob::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Reinforce,
    Vimco,
    Rws,
}

/// How REINFORCE and VIMCO differentiate through `z_c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuousGrad {
    ScoreFunction,
    #[default]
    Reparameterized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: Estimator,
    /// `S`.
    pub particles: usize,
    #[serde(default)]
    pub continuous: ContinuousGrad,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let min = if self.method == Estimator::Vimco {
            2
        } else {
            1
        };
        if self.particles < min {
            return Err(Error::Config(format!(
                "{:?} needs at least {min} particles, got {}",
                self.method, self.particles
            )));
        }
        Ok(())
    }
}

/// A particle before evaluation: the discrete latent and the standard-normal
/// noise that, pushed through `q(z_c | z_d, x)`, gives `z_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Particle<Z> {
    pub z: Z,
    pub eps: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BaselineOutput {
    pub gen: Gradients,
    pub rec: Gradients,
    pub log_weights: Vec<f64>,
    /// No usable particle; gradients are zero.
    pub skipped: bool,
}

struct Evaluated {
    log_p: Var,
    log_qd: Var,
    log_qc: Var,
    log_w: f64,
}

/// Draws `S` particles from `q(z_d | x)` with fresh continuous noise.
pub fn draw_particles<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    s: usize,
    rng: &mut StreamRng,
) -> Result<Vec<Particle<M::Discrete>>> {
    let mut tape = Tape::new(store);
    let enc = model.encode(&mut tape, store, x)?;
    (0..s)
        .map(|_| {
            let z = model.sample_discrete(&mut tape, store, enc, rng)?;
            let eps = (0..model.continuous_dim(&z))
                .map(|_| StandardNormal.sample(rng))
                .collect();
            Ok(Particle { z, eps })
        })
        .collect()
}

fn evaluate<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    tape: &mut Tape,
    enc: Var,
    x: &M::Obs,
    p: &Particle<M::Discrete>,
    reparam: bool,
) -> Result<Evaluated> {
    let log_qd = model.log_q_discrete(tape, store, enc, &p.z)?;
    let (mean, log_std) = model.q_continuous(tape, store, enc, &p.z)?;
    let eps = tape.constant(Tensor::vector(p.eps.clone()));
    let zc = if reparam {
        let s = tape.exp(log_std)?;
        let se = tape.mul(s, eps)?;
        tape.add(mean, se)?
    } else {
        let m = tape.value(mean).data();
        let s = tape.value(log_std).data();
        let v: Vec<f64> = m
            .iter()
            .zip(s)
            .zip(&p.eps)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect();
        tape.constant(Tensor::vector(v))
    };
    let log_qc = model::log_q_continuous(tape, mean, log_std, zc)?;
    let log_p = model::log_joint(model, tape, store, &p.z, zc, x)?;
    let lw = tape.item(log_p) - tape.item(log_qd) - tape.item(log_qc);
    Ok(Evaluated {
        log_p,
        log_qd,
        log_qc,
        log_w: if lw.is_nan() { f64::NEG_INFINITY } else { lw },
    })
}

fn split(store: &ParamStore, g: Gradients) -> (Gradients, Gradients) {
    let rec = g.clone().restrict(store, Role::Recognition);
    (g.restrict(store, Role::Generative), rec)
}

fn skipped(store: &ParamStore, log_weights: Vec<f64>) -> BaselineOutput {
    BaselineOutput {
        gen: Gradients::zeros(store),
        rec: Gradients::zeros(store),
        log_weights,
        skipped: true,
    }
}

fn finish(
    store: &ParamStore,
    tape: &mut Tape,
    terms: &[Var],
    coeffs: &[f64],
    log_weights: Vec<f64>,
) -> Result<BaselineOutput> {
    let s = tape.weighted_sum(terms, coeffs)?;
    let g = tape.grad(store, s)?;
    if !g.is_finite() {
        return Ok(skipped(store, log_weights));
    }
    let (gen, rec) = split(store, g);
    Ok(BaselineOutput {
        gen,
        rec,
        log_weights,
        skipped: false,
    })
}

/// Score-function ELBO gradient without control variates, on given particles.
///
/// Per particle the recognition direction is `f ∇ log q + ∇ log(p/q)` with
/// `f = log(p/q)` held fixed; the generative direction is `∇ log p`. Both are
/// averaged over the finite particles and negated for descent.
pub fn reinforce_from<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    particles: &[Particle<M::Discrete>],
    mode: ContinuousGrad,
) -> Result<BaselineOutput> {
    let reparam = mode == ContinuousGrad::Reparameterized;
    let mut tape = Tape::new(store);
    let enc = model.encode(&mut tape, store, x)?;
    let evals: Vec<Evaluated> = particles
        .iter()
        .map(|p| evaluate(model, store, &mut tape, enc, x, p, reparam))
        .collect::<Result<_>>()?;
    let log_weights: Vec<f64> = evals.iter().map(|e| e.log_w).collect();
    let live: Vec<&Evaluated> = evals.iter().filter(|e| e.log_w.is_finite()).collect();
    if live.is_empty() {
        return Ok(skipped(store, log_weights));
    }
    let c = -1.0 / live.len() as f64;
    let (mut terms, mut coeffs) = (Vec::new(), Vec::new());
    for e in live {
        let f = e.log_w;
        let score = if reparam {
            e.log_qd
        } else {
            tape.add(e.log_qd, e.log_qc)?
        };
        terms.extend([score, e.log_p, e.log_qd, e.log_qc]);
        coeffs.extend([c * f, c, -c, -c]);
    }
    finish(store, &mut tape, &terms, &coeffs, log_weights)
}

/// Multi-sample bound gradient with leave-one-out control variates.
///
/// The learning signal of particle `s` is `L − L_{−s}`, where `L_{−s}` replaces
/// `w_s` by the geometric mean of the other weights.
pub fn vimco_from<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    particles: &[Particle<M::Discrete>],
    mode: ContinuousGrad,
) -> Result<BaselineOutput> {
    if particles.len() < 2 {
        return Err(Error::Config("vimco needs at least 2 particles".into()));
    }
    let reparam = mode == ContinuousGrad::Reparameterized;
    let mut tape = Tape::new(store);
    let enc = model.encode(&mut tape, store, x)?;
    let evals: Vec<Evaluated> = particles
        .iter()
        .map(|p| evaluate(model, store, &mut tape, enc, x, p, reparam))
        .collect::<Result<_>>()?;
    let lw: Vec<f64> = evals.iter().map(|e| e.log_w).collect();
    let signals = vimco_signals(&lw);
    let Some(signals) = signals else {
        return Ok(skipped(store, lw));
    };

    let mut parts = Vec::with_capacity(evals.len());
    for e in &evals {
        let a = tape.sub(e.log_p, e.log_qd)?;
        parts.push(tape.sub(a, e.log_qc)?);
    }
    let lws = tape.concat(&parts)?;
    let bound = tape.log_sum_exp(lws)?;
    let (mut terms, mut coeffs) = (vec![bound], vec![-1.0]);
    for (e, &sig) in evals.iter().zip(&signals) {
        let score = if reparam {
            e.log_qd
        } else {
            tape.add(e.log_qd, e.log_qc)?
        };
        terms.push(score);
        coeffs.push(-sig);
    }
    finish(store, &mut tape, &terms, &coeffs, lw)
}

/// `L − L_{−s}` for every particle, or `None` when every weight is `-inf`.
pub fn vimco_signals(log_w: &[f64]) -> Option<Vec<f64>> {
    let s = log_w.len();
    let total = log_sum_exp(log_w);
    if total == f64::NEG_INFINITY {
        return None;
    }
    let sum_lw: f64 = log_w.iter().sum();
    let out = (0..s)
        .map(|i| {
            if !log_w[i].is_finite() {
                return 0.0;
            }
            let mean_others = (sum_lw - log_w[i]) / (s - 1) as f64;
            let mut replaced = log_w.to_vec();
            replaced[i] = if mean_others.is_nan() {
                f64::NEG_INFINITY
            } else {
                mean_others
            };
            total - log_sum_exp(&replaced)
        })
        .collect();
    Some(out)
}

/// Reweighted wake-sleep: self-normalized wake-θ and wake-φ gradients.
pub fn rws_from<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    particles: &[Particle<M::Discrete>],
) -> Result<BaselineOutput> {
    let mut tape = Tape::new(store);
    let enc = model.encode(&mut tape, store, x)?;
    let evals: Vec<Evaluated> = particles
        .iter()
        .map(|p| evaluate(model, store, &mut tape, enc, x, p, false))
        .collect::<Result<_>>()?;
    let lw: Vec<f64> = evals.iter().map(|e| e.log_w).collect();
    let total = log_sum_exp(&lw);
    if total == f64::NEG_INFINITY || !total.is_finite() {
        return Ok(skipped(store, lw));
    }
    let (mut terms, mut coeffs) = (Vec::new(), Vec::new());
    for (e, l) in evals.iter().zip(&lw) {
        let w = (l - total).exp();
        if w > 0.0 {
            terms.extend([e.log_p, e.log_qd, e.log_qc]);
            coeffs.extend([-w, -w, -w]);
        }
    }
    finish(store, &mut tape, &terms, &coeffs, lw)
}

pub fn reinforce_grad<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    s: usize,
    mode: ContinuousGrad,
    rng: &mut StreamRng,
) -> Result<BaselineOutput> {
    let p = draw_particles(model, store, x, s, rng)?;
    reinforce_from(model, store, x, &p, mode)
}

pub fn vimco_grad<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    s: usize,
    mode: ContinuousGrad,
    rng: &mut StreamRng,
) -> Result<BaselineOutput> {
    let p = draw_particles(model, store, x, s, rng)?;
    vimco_from(model, store, x, &p, mode)
}

pub fn rws_grads<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    s: usize,
    rng: &mut StreamRng,
) -> Result<BaselineOutput> {
    let p = draw_particles(model, store, x, s, rng)?;
    rws_from(model, store, x, &p)
}

/// Runs the configured estimator on one datapoint.
pub fn baseline_step<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    config: &BaselineConfig,
    rng: &mut StreamRng,
) -> Result<BaselineOutput> {
    config.validate()?;
    let s = config.particles;
    match config.method {
        Estimator::Reinforce => reinforce_grad(model, store, x, s, config.continuous, rng),
        Estimator::Vimco => vimco_grad(model, store, x, s, config.continuous, rng),
        Estimator::Rws => rws_grads(model, store, x, s, rng),
    }
}

/// `log (1/S) Σ_s p(z_s, x) / q(z_s | x)` with `z_s ~ q`; `-inf` if every
/// weight vanishes.
pub fn iwae_log_marginal<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    s: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    if s == 0 {
        return Err(Error::EmptySamples);
    }
    let particles = draw_particles(model, store, x, s, rng)?;
    let mut tape = Tape::new(store);
    let enc = model.encode(&mut tape, store, x)?;
    let mut lw = Vec::with_capacity(s);
    for p in &particles {
        lw.push(evaluate(model, store, &mut tape, enc, x, p, false)?.log_w);
    }
    Ok(log_sum_exp(&lw) - (s as f64).ln())
}
