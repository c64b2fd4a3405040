use super::wake::{WakeResult, WakeTrace, WakeWeights};
use crate::ad::{Gradients, ParamStore, Role, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{self, HybridModel};
use crate::prob::StreamRng;

fn parts<Z>(wake: &mut WakeResult<Z>) -> Result<(&WakeWeights, &[Z], &mut WakeTrace)> {
    if wake.degenerate {
        return Err(Error::DegenerateWeights);
    }
    let WakeResult {
        weights,
        latents,
        trace,
        ..
    } = wake;
    let t = trace
        .as_mut()
        .ok_or_else(|| Error::Config("wake result has no recorded trace".into()))?;
    Ok((weights, latents, t))
}

/// Scalar terms and their coefficients, with zero-coefficient terms dropped.
#[derive(Default)]
struct Surrogate {
    terms: Vec<Var>,
    coeffs: Vec<f64>,
}

impl Surrogate {
    fn push(&mut self, v: Var, c: f64) {
        if c != 0.0 {
            self.terms.push(v);
            self.coeffs.push(c);
        }
    }

    fn backward(&self, tape: &mut Tape, store: &ParamStore) -> Result<Gradients> {
        if self.terms.is_empty() {
            return Ok(Gradients::zeros(store));
        }
        let s = tape.weighted_sum(&self.terms, &self.coeffs)?;
        tape.grad(store, s)
    }
}

fn push_gen(s: &mut Surrogate, w: &WakeWeights, t: &WakeTrace, scale: f64) {
    for (row, vs) in t.log_joint.iter().zip(&w.v) {
        for (&lp, &v) in row.iter().zip(vs) {
            s.push(lp, -scale * v);
        }
    }
}

fn push_discrete<M: HybridModel>(
    s: &mut Surrogate,
    model: &M,
    store: &ParamStore,
    latents: &[M::Discrete],
    omega: &[f64],
    t: &mut WakeTrace,
    scale: f64,
) -> Result<()> {
    for (z, &w) in latents.iter().zip(omega) {
        if w > 0.0 {
            let lq = model.log_q_discrete(&mut t.tape, store, t.enc, z)?;
            s.push(lq, -scale * w);
        }
    }
    Ok(())
}

fn push_continuous(s: &mut Surrogate, w: &WakeWeights, t: &WakeTrace, scale: f64) {
    let m = t.log_qc.len() as f64;
    for (row, ws) in t.log_qc.iter().zip(&w.w_bar) {
        for (&lq, &w) in row.iter().zip(ws) {
            s.push(lq, -scale * w / m);
        }
    }
}

/// `−Σ_{m,k} v_mk ∇_θ log p(z_d^m, z_c^{mk}, x)`.
pub fn gen_grad<M: HybridModel>(
    _model: &M,
    store: &ParamStore,
    wake: &mut WakeResult<M::Discrete>,
) -> Result<Gradients> {
    let (w, _, t) = parts(wake)?;
    let mut s = Surrogate::default();
    push_gen(&mut s, w, t, 1.0);
    Ok(s.backward(&mut t.tape, store)?
        .restrict(store, Role::Generative))
}

/// `−Σ_m ω_m ∇_φ log q(z_d^m | x)`.
pub fn discrete_replay_grad<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    wake: &mut WakeResult<M::Discrete>,
) -> Result<Gradients> {
    let (w, latents, t) = parts(wake)?;
    let mut s = Surrogate::default();
    push_discrete(&mut s, model, store, latents, &w.omega, t, 1.0)?;
    Ok(s.backward(&mut t.tape, store)?
        .restrict(store, Role::Recognition))
}

/// `−(1/M) Σ_{m,k} w̄_mk ∇_φ log q(z_c^{mk} | z_d^m, x)`.
pub fn continuous_replay_grad<Z>(
    store: &ParamStore,
    wake: &mut WakeResult<Z>,
) -> Result<Gradients> {
    let (w, _, t) = parts(wake)?;
    let mut s = Surrogate::default();
    push_continuous(&mut s, w, t, 1.0);
    Ok(s.backward(&mut t.tape, store)?
        .restrict(store, Role::Recognition))
}

/// θ-gradient and `λ`-scaled replay φ-gradient from a single backward pass.
pub fn replay_grads<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    wake: &mut WakeResult<M::Discrete>,
    lambda: f64,
) -> Result<(Gradients, Gradients)> {
    let (w, latents, t) = parts(wake)?;
    let mut s = Surrogate::default();
    push_gen(&mut s, w, t, 1.0);
    if lambda > 0.0 {
        push_continuous(&mut s, w, t, lambda);
        push_discrete(&mut s, model, store, latents, &w.omega, t, lambda)?;
    }
    let g = s.backward(&mut t.tape, store)?;
    let rec = g.clone().restrict(store, Role::Recognition);
    Ok((g.restrict(store, Role::Generative), rec))
}

/// `−(1/K) Σ_k ∇_φ log q(z_k | x_k)` over `(z_k, x_k)` drawn from the model.
pub fn fantasy_grad<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    k: usize,
    rng: &mut StreamRng,
) -> Result<Gradients> {
    let mut total = Gradients::zeros(store);
    for _ in 0..k {
        let (z, zc, x) = model.sample_joint(store, rng)?;
        let mut tape = Tape::new(store);
        let enc = model.encode(&mut tape, store, &x)?;
        let lqd = model.log_q_discrete(&mut tape, store, enc, &z)?;
        let (mean, log_std) = model.q_continuous(&mut tape, store, enc, &z)?;
        let zv = tape.constant(Tensor::vector(zc));
        let lqc = model::log_q_continuous(&mut tape, mean, log_std, zv)?;
        let lq = tape.add(lqd, lqc)?;
        let g = tape.grad(store, lq)?;
        total.add_scaled(-1.0 / k as f64, &g);
    }
    Ok(total.restrict(store, Role::Recognition))
}
