//! A mixture-of-Gaussians model whose marginals are available in closed form.
//!
//! `z_d ~ Cat(π)`, `z_c | z_d ~ N(μ_{z_d}, s²)`, `x | z_c ~ N(z_c, s_x²)`.
//! Integrating out `z_c` gives `x | z_d ~ N(μ_{z_d}, s² + s_x²)`, so the joint
//! over `(z_d, x)`, the evidence and both posteriors are exact.

use rand::Rng;
use rand_distr::StandardNormal;

use super::dist::{categorical_log_prob, gaussian_log_prob, normal_log_pdf, Categorical};
use super::rng::StreamRng;
use crate::ad::{log_sum_exp, ParamStore, Role, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{EvalCounters, HybridModel};

#[derive(Clone, Debug, PartialEq)]
pub struct ConjugateTestbed {
    /// Prior probabilities over `z_d`.
    pub prior: Vec<f64>,
    pub means: Vec<f64>,
    pub prior_std: f64,
    pub obs_std: f64,
}

/// Closed-form quantities at one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct TestbedExact {
    /// `log p(z_d, x)` for every `z_d`.
    pub log_joint: Vec<f64>,
    pub log_marginal: f64,
    /// `p(z_d | x)`.
    pub posterior: Vec<f64>,
    /// Mean and std of `p(z_c | z_d, x)` for every `z_d`.
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
    /// Moments of `p(z_c | x)`.
    pub post_mean: f64,
    pub post_var: f64,
}

impl ConjugateTestbed {
    pub fn new(prior: Vec<f64>, means: Vec<f64>, prior_std: f64, obs_std: f64) -> Result<Self> {
        if prior.len() != means.len() {
            return Err(Error::LengthMismatch(prior.len(), means.len()));
        }
        if prior.is_empty() {
            return Err(Error::EmptySamples);
        }
        if !(prior_std > 0.0 && obs_std > 0.0) {
            return Err(Error::Config(
                "testbed standard deviations must be positive".into(),
            ));
        }
        Ok(ConjugateTestbed {
            prior,
            means,
            prior_std,
            obs_std,
        })
    }

    pub fn arity(&self) -> usize {
        self.prior.len()
    }

    fn marginal_var(&self) -> f64 {
        self.prior_std.powi(2) + self.obs_std.powi(2)
    }

    pub fn exact(&self, x: f64) -> TestbedExact {
        let v = self.marginal_var();
        let log_joint: Vec<f64> = self
            .prior
            .iter()
            .zip(&self.means)
            .map(|(p, m)| p.ln() + normal_log_pdf(x, *m, v.sqrt()))
            .collect();
        let log_marginal = log_sum_exp(&log_joint);
        let posterior: Vec<f64> = log_joint.iter().map(|l| (l - log_marginal).exp()).collect();
        let (s2, sx2) = (self.prior_std.powi(2), self.obs_std.powi(2));
        let cond_mean: Vec<f64> = self.means.iter().map(|m| (m * sx2 + x * s2) / v).collect();
        let cs = (s2 * sx2 / v).sqrt();
        let cond_std = vec![cs; self.arity()];
        let post_mean: f64 = posterior.iter().zip(&cond_mean).map(|(p, m)| p * m).sum();
        let second: f64 = posterior
            .iter()
            .zip(&cond_mean)
            .map(|(p, m)| p * (cs * cs + m * m))
            .sum();
        TestbedExact {
            log_joint,
            log_marginal,
            posterior,
            cond_mean,
            cond_std,
            post_mean,
            post_var: second - post_mean * post_mean,
        }
    }

    /// `(z_d, z_c, x)` from the joint.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64, f64) {
        let d = Categorical::from_logits(self.prior.iter().map(|p| p.ln()).collect())
            .expect("valid prior")
            .sample(rng);
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let zc = self.means[d] + self.prior_std * e1;
        (d, zc, zc + self.obs_std * e2)
    }

    /// `log p(z_d, z_c, x)`.
    pub fn log_joint(&self, d: usize, zc: f64, x: f64) -> f64 {
        self.prior[d].ln()
            + normal_log_pdf(zc, self.means[d], self.prior_std)
            + normal_log_pdf(x, zc, self.obs_std)
    }
}

const GEN_LOGITS: &str = "gen.logits";
const GEN_MEANS: &str = "gen.means";
const GEN_LOG_PRIOR_STD: &str = "gen.log_prior_std";
const GEN_LOG_OBS_STD: &str = "gen.log_obs_std";
const REC_D_BIAS: &str = "rec.disc.bias";
const REC_D_SLOPE: &str = "rec.disc.slope";
const REC_C_BIAS: &str = "rec.cont.bias";
const REC_C_SLOPE: &str = "rec.cont.slope";
const REC_C_LOG_STD: &str = "rec.cont.log_std";

/// The testbed as a learnable [`HybridModel`] with scalar observations.
///
/// Recognition: `q(z_d | x)` has logits `a + b x` and `q(z_c | z_d, x)` is
/// `N(c_d + e_d x, exp(f_d)²)`. Both families contain the exact posterior.
#[derive(Debug, Default)]
pub struct TestbedModel {
    arity: usize,
    counters: EvalCounters,
}

impl TestbedModel {
    pub fn new(arity: usize) -> Self {
        TestbedModel {
            arity,
            counters: EvalCounters::default(),
        }
    }

    /// Parameters holding `tb` as θ and a flat recognition model.
    pub fn init_store(&self, tb: &ConjugateTestbed) -> Result<ParamStore> {
        let d = self.arity;
        if tb.arity() != d {
            return Err(Error::LengthMismatch(tb.arity(), d));
        }
        let mut s = ParamStore::new();
        s.insert(
            GEN_LOGITS,
            Role::Generative,
            Tensor::vector(tb.prior.iter().map(|p| p.ln()).collect()),
        )?;
        s.insert(
            GEN_MEANS,
            Role::Generative,
            Tensor::vector(tb.means.clone()),
        )?;
        s.insert(
            GEN_LOG_PRIOR_STD,
            Role::Generative,
            Tensor::scalar(tb.prior_std.ln()),
        )?;
        s.insert(
            GEN_LOG_OBS_STD,
            Role::Generative,
            Tensor::scalar(tb.obs_std.ln()),
        )?;
        for name in [
            REC_D_BIAS,
            REC_D_SLOPE,
            REC_C_BIAS,
            REC_C_SLOPE,
            REC_C_LOG_STD,
        ] {
            s.insert(name, Role::Recognition, Tensor::zeros(&[d]))?;
        }
        Ok(s)
    }

    /// The testbed described by the current θ.
    pub fn testbed(&self, store: &ParamStore) -> Result<ConjugateTestbed> {
        let logits = store.get(GEN_LOGITS)?.data().to_vec();
        let prior = Categorical::from_logits(logits)?.probs();
        ConjugateTestbed::new(
            prior,
            store.get(GEN_MEANS)?.data().to_vec(),
            store.get(GEN_LOG_PRIOR_STD)?.item().exp(),
            store.get(GEN_LOG_OBS_STD)?.item().exp(),
        )
    }

    /// Sets φ to the exact posterior of the current θ.
    pub fn set_exact_recognition(&self, store: &mut ParamStore) -> Result<()> {
        let tb = self.testbed(store)?;
        let v = tb.marginal_var();
        let (s2, sx2) = (tb.prior_std.powi(2), tb.obs_std.powi(2));
        let bias = tb
            .prior
            .iter()
            .zip(&tb.means)
            .map(|(p, m)| p.ln() - m * m / (2.0 * v));
        store.set(REC_D_BIAS, Tensor::vector(bias.collect()))?;
        store.set(
            REC_D_SLOPE,
            Tensor::vector(tb.means.iter().map(|m| m / v).collect()),
        )?;
        store.set(
            REC_C_BIAS,
            Tensor::vector(tb.means.iter().map(|m| m * sx2 / v).collect()),
        )?;
        store.set(REC_C_SLOPE, Tensor::vector(vec![s2 / v; self.arity]))?;
        store.set(
            REC_C_LOG_STD,
            Tensor::vector(vec![0.5 * (s2 * sx2 / v).ln(); self.arity]),
        )?;
        Ok(())
    }

    /// `q(z_d | x)` probabilities from current φ.
    pub fn q_discrete_probs(&self, store: &ParamStore, x: f64) -> Result<Vec<f64>> {
        Ok(Categorical::from_logits(self.disc_logits(store, x)?)?.probs())
    }

    fn disc_logits(&self, store: &ParamStore, x: f64) -> Result<Vec<f64>> {
        let a = store.get(REC_D_BIAS)?.data();
        let b = store.get(REC_D_SLOPE)?.data();
        Ok(a.iter().zip(b).map(|(a, b)| a + b * x).collect())
    }

    fn check(&self, z: usize) -> Result<()> {
        if z < self.arity {
            Ok(())
        } else {
            Err(Error::OutOfSupport {
                dist: "TestbedModel",
                value: z.to_string(),
            })
        }
    }
}

fn as_vec(tape: &mut Tape, v: Var) -> Result<Var> {
    tape.reshape(v, vec![1])
}

impl HybridModel for TestbedModel {
    type Discrete = usize;
    type Obs = f64;

    fn canonical_key(&self, z: &usize) -> Vec<u8> {
        (*z as u64).to_le_bytes().to_vec()
    }

    fn from_key(&self, key: &[u8]) -> Option<usize> {
        let z = u64::from_le_bytes(key.try_into().ok()?) as usize;
        (z < self.arity).then_some(z)
    }

    fn counters(&self) -> &EvalCounters {
        &self.counters
    }

    fn continuous_dim(&self, _z: &usize) -> usize {
        1
    }

    fn log_prior_discrete(&self, tape: &mut Tape, store: &ParamStore, z: &usize) -> Result<Var> {
        self.check(*z)?;
        let logits = tape.param(store, GEN_LOGITS)?;
        categorical_log_prob(tape, logits, *z)
    }

    fn log_conditional(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &usize,
        zc: Var,
        x: &f64,
    ) -> Result<Var> {
        self.check(*z)?;
        let means = tape.param(store, GEN_MEANS)?;
        let mean = tape.pick(means, *z)?;
        let mean = as_vec(tape, mean)?;
        let ls = tape.param(store, GEN_LOG_PRIOR_STD)?;
        let lsx = tape.param(store, GEN_LOG_OBS_STD)?;
        let prior = gaussian_log_prob(tape, zc, mean, ls)?;
        let xv = tape.constant(Tensor::vector(vec![*x]));
        let lik = gaussian_log_prob(tape, xv, zc, lsx)?;
        tape.add(prior, lik)
    }

    fn sample_prior_discrete(&self, store: &ParamStore, rng: &mut StreamRng) -> Result<usize> {
        let logits = store.get(GEN_LOGITS)?.data().to_vec();
        Ok(Categorical::from_logits(logits)?.sample(rng))
    }

    fn sample_joint(
        &self,
        store: &ParamStore,
        rng: &mut StreamRng,
    ) -> Result<(usize, Vec<f64>, f64)> {
        let (d, zc, x) = self.testbed(store)?.sample(rng);
        Ok((d, vec![zc], x))
    }

    fn encode(&self, tape: &mut Tape, _store: &ParamStore, x: &f64) -> Result<Var> {
        Ok(tape.scalar(*x))
    }

    fn sample_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        rng: &mut StreamRng,
    ) -> Result<usize> {
        let x = tape.item(enc);
        Ok(Categorical::from_logits(self.disc_logits(store, x)?)?.sample(rng))
    }

    fn log_q_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        z: &usize,
    ) -> Result<Var> {
        self.check(*z)?;
        let a = tape.param(store, REC_D_BIAS)?;
        let b = tape.param(store, REC_D_SLOPE)?;
        let bx = tape.mul(b, enc)?;
        let logits = tape.add(a, bx)?;
        categorical_log_prob(tape, logits, *z)
    }

    fn q_continuous(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        z: &usize,
    ) -> Result<(Var, Var)> {
        self.check(*z)?;
        let c = tape.param(store, REC_C_BIAS)?;
        let e = tape.param(store, REC_C_SLOPE)?;
        let f = tape.param(store, REC_C_LOG_STD)?;
        let c = tape.pick(c, *z)?;
        let e = tape.pick(e, *z)?;
        let ex = tape.mul(e, enc)?;
        let mean = tape.add(c, ex)?;
        let mean = as_vec(tape, mean)?;
        let ls = tape.pick(f, *z)?;
        let ls = as_vec(tape, ls)?;
        Ok((mean, ls))
    }
}
