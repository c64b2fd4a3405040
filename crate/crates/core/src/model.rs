//! The contract between the inference engine and a model domain.
//!
//! A hybrid model is a joint `p_θ(z_d, z_c, x)` over a structured discrete
//! latent `z_d`, a flat real vector `z_c` whose length depends on `z_d`, and an
//! observation `x`, together with a recognition model factorized as
//! `q_φ(z_d | x) · q_φ(z_c | z_d, x)` where the continuous factor is a diagonal
//! Gaussian.
//!
//! Everything that carries a gradient is recorded on a [`Tape`]. Generative
//! terms may only read [`Role::Generative`](crate::ad::Role) slots and
//! recognition terms only [`Role::Recognition`](crate::ad::Role) slots.

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::ad::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::prob::{gaussian_log_prob, StreamRng};

/// Instrumentation for likelihood-evaluation budgets.
#[derive(Debug, Default)]
pub struct EvalCounters {
    likelihood: AtomicU64,
    discrete_prior: AtomicU64,
}

impl EvalCounters {
    pub fn likelihood(&self) -> u64 {
        self.likelihood.load(Ordering::Relaxed)
    }

    pub fn discrete_prior(&self) -> u64 {
        self.discrete_prior.load(Ordering::Relaxed)
    }

    pub(crate) fn add_likelihood(&self, n: u64) {
        self.likelihood.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn add_discrete_prior(&self, n: u64) {
        self.discrete_prior.fetch_add(n, Ordering::Relaxed);
    }

    pub fn set(&self, likelihood: u64, discrete_prior: u64) {
        self.likelihood.store(likelihood, Ordering::Relaxed);
        self.discrete_prior.store(discrete_prior, Ordering::Relaxed);
    }
}

pub trait HybridModel: Sync {
    /// Discrete latent `z_d`.
    type Discrete: Clone + Debug + Send + Sync;
    /// Observation `x`.
    type Obs: Send + Sync;

    /// Canonical byte form; equal iff the latents are the same.
    fn canonical_key(&self, z: &Self::Discrete) -> Vec<u8>;

    /// Inverse of [`canonical_key`](Self::canonical_key).
    fn from_key(&self, key: &[u8]) -> Option<Self::Discrete>;

    fn counters(&self) -> &EvalCounters;

    /// Length of `z_c` given `z_d`.
    fn continuous_dim(&self, z: &Self::Discrete) -> usize;

    /// `log p_θ(z_d)`.
    fn log_prior_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &Self::Discrete,
    ) -> Result<Var>;

    /// `log p_θ(z_c | z_d) + log p_θ(x | z_d, z_c)`; `z_c` may itself carry a
    /// gradient (reparameterized estimators).
    fn log_conditional(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &Self::Discrete,
        zc: Var,
        x: &Self::Obs,
    ) -> Result<Var>;

    fn sample_prior_discrete(
        &self,
        store: &ParamStore,
        rng: &mut StreamRng,
    ) -> Result<Self::Discrete>;

    /// `(z_d, z_c, x) ~ p_θ`.
    fn sample_joint(
        &self,
        store: &ParamStore,
        rng: &mut StreamRng,
    ) -> Result<(Self::Discrete, Vec<f64>, Self::Obs)>;

    /// Recognition features of `x`, shared by both recognition factors.
    fn encode(&self, tape: &mut Tape, store: &ParamStore, x: &Self::Obs) -> Result<Var>;

    fn sample_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        rng: &mut StreamRng,
    ) -> Result<Self::Discrete>;

    /// `log q_φ(z_d | x)`.
    fn log_q_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        z: &Self::Discrete,
    ) -> Result<Var>;

    /// Mean and log-std of the Gaussian `q_φ(z_c | z_d, x)`.
    fn q_continuous(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        z: &Self::Discrete,
    ) -> Result<(Var, Var)>;
}

/// `log p_θ(z_d, z_c, x)`, counting one prior and one likelihood evaluation.
pub fn log_joint<M: HybridModel>(
    model: &M,
    tape: &mut Tape,
    store: &ParamStore,
    z: &M::Discrete,
    zc: Var,
    x: &M::Obs,
) -> Result<Var> {
    let prior = log_prior_discrete(model, tape, store, z)?;
    let cond = log_conditional(model, tape, store, z, zc, x)?;
    tape.add(prior, cond)
}

pub fn log_prior_discrete<M: HybridModel>(
    model: &M,
    tape: &mut Tape,
    store: &ParamStore,
    z: &M::Discrete,
) -> Result<Var> {
    model.counters().add_discrete_prior(1);
    model.log_prior_discrete(tape, store, z)
}

pub fn log_conditional<M: HybridModel>(
    model: &M,
    tape: &mut Tape,
    store: &ParamStore,
    z: &M::Discrete,
    zc: Var,
    x: &M::Obs,
) -> Result<Var> {
    model.counters().add_likelihood(1);
    model.log_conditional(tape, store, z, zc, x)
}

/// `log q_φ(z_c | z_d, x)` for a fixed sample.
pub fn log_q_continuous(tape: &mut Tape, mean: Var, log_std: Var, zc: Var) -> Result<Var> {
    gaussian_log_prob(tape, zc, mean, log_std)
}

/// Draws `k` values from the Gaussian with the given tape-resident parameters.
pub fn sample_continuous(
    tape: &Tape,
    mean: Var,
    log_std: Var,
    k: usize,
    rng: &mut StreamRng,
) -> Vec<Vec<f64>> {
    let m = tape.value(mean).data();
    let ls = tape.value(log_std).data();
    (0..k)
        .map(|_| {
            m.iter()
                .zip(ls)
                .map(|(m, ls)| {
                    let e: f64 = rand::Rng::sample(rng, rand_distr::StandardNormal);
                    m + ls.exp() * e
                })
                .collect()
        })
        .collect()
}

/// Reparameterized draw `z_c = mean + exp(log_std) ⊙ ε` on the tape.
pub fn reparam_continuous(
    tape: &mut Tape,
    mean: Var,
    log_std: Var,
    rng: &mut StreamRng,
) -> Result<Var> {
    let n = tape.value(mean).len();
    let eps: Vec<f64> = (0..n)
        .map(|_| rand::Rng::sample(rng, rand_distr::StandardNormal))
        .collect();
    let e = tape.constant(Tensor::vector(eps));
    let s = tape.exp(log_std)?;
    let se = tape.mul(s, e)?;
    tape.add(mean, se)
}
