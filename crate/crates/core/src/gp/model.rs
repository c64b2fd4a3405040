//! Autoregressive kernel priors and recognition networks.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grammar::{
    operator_allowed, KernelExpr, Token, MAX_PARAMS, NUM_PERIOD_BUCKETS, NUM_TOKENS,
};
use super::kernel::{constrained, kernel_matrix, softplus_inv, split_params};
use super::likelihood::{gp_log_marginal_on_tape, gp_predict, jittered_cholesky, Prediction};
use crate::ad::{softplus, ParamStore, Role, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{EvalCounters, HybridModel};
use crate::nn::{ConvEmbedding, Gru, Linear};
use crate::prob::{categorical_log_prob, gaussian_log_prob, sample_log_probs, StreamRng};

const START: usize = NUM_TOKENS;
const HEAD: usize = 2 * MAX_PARAMS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub max_len: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub conv_channels: (usize, usize),
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub num_points: usize,
    pub init_noise: f64,
    /// Token names the networks may emit; empty means all.
    pub tokens: Vec<String>,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            max_len: 9,
            hidden: 64,
            embed_dim: 64,
            conv_channels: (8, 8),
            conv_kernel: 4,
            conv_stride: 2,
            num_points: 128,
            init_noise: 0.3,
            tokens: Vec::new(),
        }
    }
}

impl GpConfig {
    fn mask(&self) -> Result<[bool; NUM_TOKENS]> {
        if self.max_len == 0 || self.hidden == 0 || self.embed_dim == 0 || self.num_points < 2 {
            return Err(Error::Config(
                "gp sizes must be positive (at least two points)".into(),
            ));
        }
        if !(self.init_noise > 0.0) {
            return Err(Error::Config("init_noise must be positive".into()));
        }
        let mut mask = [self.tokens.is_empty(); NUM_TOKENS];
        for name in &self.tokens {
            mask[Token::parse(name)?.index()] = true;
        }
        if !Token::all().any(|t| !t.is_operator() && mask[t.index()]) {
            return Err(Error::Config(
                "at least one terminal token must be allowed".into(),
            ));
        }
        Ok(mask)
    }
}

/// Period of bucket `i` (0-based) as a fraction of the signal length.
pub fn bucket_period(i: usize) -> f64 {
    0.05 * (2.0f64 / 0.05).powf(i as f64 / (NUM_PERIOD_BUCKETS - 1) as f64)
}

/// Raw-space initial means of each token's parameters.
fn initial_means(t: Token) -> [f64; MAX_PARAMS] {
    let scale = softplus_inv(0.7);
    match t {
        Token::Plus | Token::Times => [0.0; 3],
        Token::Const => [softplus_inv(0.3), 0.0, 0.0],
        Token::WhiteNoise => [softplus_inv(0.3), 0.0, 0.0],
        Token::SquaredExp => [scale, softplus_inv(0.2), 0.0],
        Token::Linear => [softplus_inv(0.5), 0.5, 0.0],
        Token::Periodic(_) => [scale, 0.0, softplus_inv(1.0)],
    }
}

/// Token net plus parameter heads, shared by the prior and recognition model.
#[derive(Clone, Debug)]
struct Net {
    gru: Gru,
    logits: Linear,
    heads: Linear,
    table: usize,
}

impl Net {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        input: usize,
        hidden: usize,
        period_in_table: bool,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let gru = Gru::new(store, &format!("{prefix}.gru"), role, input, hidden, rng)?;
        let logits = Linear::new(
            store,
            &format!("{prefix}.logits"),
            role,
            hidden,
            NUM_TOKENS,
            rng,
        )?;
        let heads = Linear::zeros(store, &format!("{prefix}.heads"), role, hidden, HEAD)?;
        let mut table = vec![0.0; NUM_TOKENS * HEAD];
        for t in Token::all() {
            let mut m = initial_means(t);
            if let (Token::Periodic(b), true) = (t, period_in_table) {
                m[1] = softplus_inv(bucket_period(b as usize - 1));
            }
            let row = &mut table[t.index() * HEAD..(t.index() + 1) * HEAD];
            row[..MAX_PARAMS].copy_from_slice(&m);
            row[MAX_PARAMS..].fill(-0.5);
        }
        let table = store.insert(
            format!("{prefix}.table"),
            role,
            Tensor::matrix(NUM_TOKENS, HEAD, table)?,
        )?;
        Ok(Net {
            gru,
            logits,
            heads,
            table,
        })
    }
}

/// What a pass over a token string should produce.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Want {
    Tokens,
    Params,
}

struct Pass {
    log_prob: Option<Var>,
    mean: Vec<Var>,
    log_std: Vec<Var>,
}

/// Kernel-structure model over fixed-grid time series.
pub struct GpModel {
    cfg: GpConfig,
    mask: [bool; NUM_TOKENS],
    inputs: Arc<[f64]>,
    counters: EvalCounters,
    prior: Net,
    buckets: usize,
    noise: usize,
    rec: Net,
    embed: ConvEmbedding,
}

impl GpModel {
    /// Registers θ and φ slots in `store`.
    pub fn new(cfg: GpConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<Self> {
        let mask = cfg.mask()?;
        let h = cfg.hidden;
        let prior = Net::new(
            store,
            "gp.prior",
            Role::Generative,
            NUM_TOKENS + 1,
            h,
            false,
            rng,
        )?;
        let b: Vec<f64> = (0..NUM_PERIOD_BUCKETS)
            .map(|i| softplus_inv(bucket_period(i)))
            .collect();
        let buckets = store.insert("gp.prior.buckets", Role::Generative, Tensor::vector(b))?;
        let noise = store.insert(
            "gp.noise",
            Role::Generative,
            Tensor::scalar(softplus_inv(cfg.init_noise)),
        )?;
        let rec = Net::new(
            store,
            "gp.rec",
            Role::Recognition,
            NUM_TOKENS + 1 + cfg.embed_dim,
            h,
            true,
            rng,
        )?;
        let embed = ConvEmbedding::new(
            store,
            "gp.rec.embed",
            Role::Recognition,
            (1, cfg.num_points, 1),
            (1, cfg.conv_kernel),
            (1, cfg.conv_stride),
            cfg.conv_channels,
            cfg.embed_dim,
            rng,
        )?;
        let n = cfg.num_points;
        let inputs: Arc<[f64]> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Ok(GpModel {
            cfg,
            mask,
            inputs,
            counters: EvalCounters::default(),
            prior,
            buckets,
            noise,
            rec,
            embed,
        })
    }

    pub fn config(&self) -> &GpConfig {
        &self.cfg
    }

    /// The input grid `0, 1/(n−1), …, 1`.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Observation noise `σ`.
    pub fn noise(&self, store: &ParamStore) -> f64 {
        softplus(store.value(self.noise).item())
    }

    /// Slot ids of the embedding's output layer.
    pub fn embedding_head_ids(&self) -> (usize, usize) {
        self.embed.head_ids()
    }

    fn allowed(&self, need: usize, t: usize) -> Vec<usize> {
        Token::all()
            .filter(|tok| self.mask[tok.index()])
            .filter(|tok| !tok.is_operator() || operator_allowed(need, t, self.cfg.max_len))
            .map(|tok| tok.index())
            .collect()
    }

    fn input(
        &self,
        net: &Net,
        tape: &mut Tape,
        store: &ParamStore,
        prev: usize,
        enc: Option<Var>,
    ) -> Result<Var> {
        let row = net.gru.input_row(tape, store, prev)?;
        match enc {
            Some(e) => tape.add(row, e),
            None => Ok(row),
        }
    }

    fn zero_state(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(&[self.cfg.hidden]))
    }

    /// Masked next-token log-probabilities over `allowed`.
    fn step_log_probs(
        &self,
        net: &Net,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        allowed: &[usize],
    ) -> Result<Var> {
        let logits = net.logits.forward(tape, store, h)?;
        let sub = tape.gather(logits, allowed.to_vec(), vec![allowed.len()])?;
        tape.log_softmax(sub)
    }

    fn param_head(
        &self,
        net: &Net,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        tok: Token,
        prior: bool,
    ) -> Result<(Var, Var)> {
        let np = tok.num_params();
        let out = net.heads.forward(tape, store, h)?;
        let table = tape.param_by_id(store, net.table)?;
        let row = tape.slice(table, tok.index() * HEAD, HEAD)?;
        let out = tape.add(out, row)?;
        let mut mean = tape.slice(out, 0, np)?;
        if let (Token::Periodic(b), true) = (tok, prior) {
            let buckets = tape.param_by_id(store, self.buckets)?;
            let bi = tape.slice(buckets, b as usize - 1, 1)?;
            let m0 = tape.slice(out, 0, 1)?;
            let m1 = tape.slice(out, 1, 1)?;
            let m1 = tape.add(m1, bi)?;
            let m2 = tape.slice(out, 2, 1)?;
            mean = tape.concat(&[m0, m1, m2])?;
        }
        let log_std = tape.slice(out, MAX_PARAMS, np)?;
        Ok((mean, log_std))
    }

    /// Runs `net` along `tokens`, which may be an incomplete prefix.
    fn pass(
        &self,
        net: &Net,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Option<Var>,
        tokens: &[Token],
        want: Want,
    ) -> Result<Pass> {
        let prior = std::ptr::eq(net, &self.prior);
        let mut out = Pass {
            log_prob: None,
            mean: Vec::new(),
            log_std: Vec::new(),
        };
        let mut terms = Vec::new();
        let h0 = self.zero_state(tape);
        let x = self.input(net, tape, store, START, enc)?;
        let mut h = net.gru.step_projected(tape, store, x, h0)?;
        let mut need = 1usize;
        for (t, &tok) in tokens.iter().enumerate() {
            if need == 0 {
                return Err(Error::Data(
                    "tokens continue past a complete expression".into(),
                ));
            }
            if want == Want::Tokens {
                let allowed = self.allowed(need, t);
                let pos = allowed
                    .iter()
                    .position(|&i| i == tok.index())
                    .ok_or_else(|| Error::OutOfSupport {
                        dist: "kernel token",
                        value: tok.name(),
                    })?;
                let lp = self.step_log_probs(net, tape, store, h, &allowed)?;
                terms.push(categorical_log_prob(tape, lp, pos)?);
            }
            need = need + tok.arity() - 1;
            let last = t + 1 == tokens.len();
            if want == Want::Tokens && last {
                break;
            }
            if want == Want::Params && tok.is_operator() && last {
                break;
            }
            let x = self.input(net, tape, store, tok.index(), enc)?;
            h = net.gru.step_projected(tape, store, x, h)?;
            if want == Want::Params && !tok.is_operator() {
                let (m, s) = self.param_head(net, tape, store, h, tok, prior)?;
                out.mean.push(m);
                out.log_std.push(s);
            }
        }
        if want == Want::Tokens {
            out.log_prob = Some(tape.add_all(&terms)?);
        }
        Ok(out)
    }

    fn sample_tokens(
        &self,
        net: &Net,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Option<Var>,
        rng: &mut StreamRng,
    ) -> Result<KernelExpr> {
        let h0 = self.zero_state(tape);
        let x = self.input(net, tape, store, START, enc)?;
        let mut h = net.gru.step_projected(tape, store, x, h0)?;
        let mut need = 1usize;
        let mut tokens = Vec::new();
        for t in 0..self.cfg.max_len {
            let allowed = self.allowed(need, t);
            let lp = self.step_log_probs(net, tape, store, h, &allowed)?;
            let i = sample_log_probs(tape.value(lp).data(), rng);
            let tok = Token::from_index(allowed[i]).expect("allowed indices are tokens");
            tokens.push(tok);
            need = need + tok.arity() - 1;
            if need == 0 {
                break;
            }
            let x = self.input(net, tape, store, tok.index(), enc)?;
            h = net.gru.step_projected(tape, store, x, h)?;
        }
        KernelExpr::new(tokens, self.cfg.max_len)
    }

    fn gaussian(&self, tape: &mut Tape, p: &Pass) -> Result<(Var, Var)> {
        Ok((tape.concat(&p.mean)?, tape.concat(&p.log_std)?))
    }

    /// `log p_θ(prefix)` for a possibly incomplete token prefix.
    pub fn prefix_log_prob(&self, store: &ParamStore, tokens: &[Token]) -> Result<f64> {
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let mut tape = Tape::new(store);
        let p = self.pass(&self.prior, &mut tape, store, None, tokens, Want::Tokens)?;
        Ok(tape.item(p.log_prob.expect("token pass")))
    }

    /// `log q_φ(prefix | x)` for a possibly incomplete token prefix.
    pub fn prefix_log_q(&self, store: &ParamStore, x: &[f64], tokens: &[Token]) -> Result<f64> {
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let mut tape = Tape::new(store);
        let enc = self.encode(&mut tape, store, &x.to_vec())?;
        let p = self.pass(&self.rec, &mut tape, store, Some(enc), tokens, Want::Tokens)?;
        Ok(tape.item(p.log_prob.expect("token pass")))
    }

    /// Mean and log-std of the raw-parameter prior `p_θ(z_c | z_d)`.
    pub fn prior_continuous(
        &self,
        store: &ParamStore,
        z: &KernelExpr,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(store);
        let p = self.pass(
            &self.prior,
            &mut tape,
            store,
            None,
            z.tokens(),
            Want::Params,
        )?;
        let (m, s) = self.gaussian(&mut tape, &p)?;
        Ok((tape.value(m).data().to_vec(), tape.value(s).data().to_vec()))
    }

    fn check_obs(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.cfg.num_points {
            return Err(Error::Data(format!(
                "expected {} samples, got {}",
                self.cfg.num_points,
                x.len()
            )));
        }
        Ok(())
    }

    /// Posterior predictive of the kernel `z` with raw parameters `zc`.
    pub fn predict(
        &self,
        store: &ParamStore,
        z: &KernelExpr,
        zc: &[f64],
        x: &[f64],
        t_star: &[f64],
        rng: &mut StreamRng,
    ) -> Result<Prediction> {
        self.check_obs(x)?;
        gp_predict(z, zc, self.noise(store), &self.inputs, x, t_star, rng)
    }

    /// Infix rendering with constrained parameter values.
    pub fn describe(&self, z: &KernelExpr, zc: &[f64]) -> String {
        let terms: Vec<Token> = z
            .tokens()
            .iter()
            .copied()
            .filter(|t| !t.is_operator())
            .collect();
        let vals: Vec<Vec<f64>> = terms
            .iter()
            .zip(split_params(z, zc))
            .map(|(&t, r)| constrained(t, r))
            .collect();
        z.describe(&vals)
    }
}

impl HybridModel for GpModel {
    type Discrete = KernelExpr;
    type Obs = Vec<f64>;

    fn canonical_key(&self, z: &KernelExpr) -> Vec<u8> {
        z.key()
    }

    fn from_key(&self, key: &[u8]) -> Option<KernelExpr> {
        KernelExpr::from_key(key, self.cfg.max_len)
    }

    fn counters(&self) -> &EvalCounters {
        &self.counters
    }

    fn continuous_dim(&self, z: &KernelExpr) -> usize {
        z.num_params()
    }

    fn log_prior_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &KernelExpr,
    ) -> Result<Var> {
        let p = self.pass(&self.prior, tape, store, None, z.tokens(), Want::Tokens)?;
        Ok(p.log_prob.expect("token pass"))
    }

    fn log_conditional(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &KernelExpr,
        zc: Var,
        x: &Vec<f64>,
    ) -> Result<Var> {
        self.check_obs(x)?;
        let p = self.pass(&self.prior, tape, store, None, z.tokens(), Want::Params)?;
        let (mean, log_std) = self.gaussian(tape, &p)?;
        let prior = gaussian_log_prob(tape, zc, mean, log_std)?;
        let raw = tape.param_by_id(store, self.noise)?;
        let sigma = tape.softplus(raw)?;
        let lik =
            gp_log_marginal_on_tape(tape, z, zc, sigma, self.inputs.clone(), x.as_slice().into())?;
        tape.add(prior, lik)
    }

    fn sample_prior_discrete(&self, store: &ParamStore, rng: &mut StreamRng) -> Result<KernelExpr> {
        let mut tape = Tape::new(store);
        self.sample_tokens(&self.prior, &mut tape, store, None, rng)
    }

    fn sample_joint(
        &self,
        store: &ParamStore,
        rng: &mut StreamRng,
    ) -> Result<(KernelExpr, Vec<f64>, Vec<f64>)> {
        let sigma = self.noise(store);
        let n = self.cfg.num_points;
        for _ in 0..100 {
            let z = self.sample_prior_discrete(store, rng)?;
            let (mean, log_std) = self.prior_continuous(store, &z)?;
            let zc: Vec<f64> = mean
                .iter()
                .zip(&log_std)
                .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut k = kernel_matrix(&z, &zc, &self.inputs, &self.inputs, false).value;
            for i in 0..n {
                k[(i, i)] += sigma * sigma;
            }
            if let Some((c, _)) = jittered_cholesky(&k) {
                let eps =
                    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let x = c.l() * eps;
                if x.iter().all(|v| v.is_finite()) {
                    return Ok((z, zc, x.iter().copied().collect()));
                }
            }
        }
        Err(Error::Data("could not draw a signal from the prior".into()))
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, x: &Vec<f64>) -> Result<Var> {
        self.check_obs(x)?;
        let xv = tape.constant(Tensor::vector(x.clone()));
        let emb = self.embed.forward(tape, store, xv)?;
        let w = self
            .rec
            .gru
            .input_rows(tape, store, NUM_TOKENS + 1, self.cfg.embed_dim)?;
        tape.matmul(emb, w)
    }

    fn sample_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        rng: &mut StreamRng,
    ) -> Result<KernelExpr> {
        self.sample_tokens(&self.rec, tape, store, Some(enc), rng)
    }

    fn log_q_discrete(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        z: &KernelExpr,
    ) -> Result<Var> {
        let p = self.pass(&self.rec, tape, store, Some(enc), z.tokens(), Want::Tokens)?;
        Ok(p.log_prob.expect("token pass"))
    }

    fn q_continuous(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        z: &KernelExpr,
    ) -> Result<(Var, Var)> {
        let p = self.pass(&self.rec, tape, store, Some(enc), z.tokens(), Want::Params)?;
        self.gaussian(tape, &p)
    }
}

#[cfg(test)]
mod tests {
    use super::super::grammar::validate_expr;
    use super::super::likelihood::gp_log_marginal;
    use super::*;
    use crate::model;
    use crate::prob::stream;
    use Token::*;

    fn small(tokens: Vec<String>, max_len: usize) -> (GpModel, ParamStore) {
        let cfg = GpConfig {
            max_len,
            hidden: 8,
            embed_dim: 8,
            num_points: 32,
            tokens,
            ..GpConfig::default()
        };
        let mut store = ParamStore::new();
        let m = GpModel::new(cfg, &mut store, &mut stream(3, 0, 0)).unwrap();
        (m, store)
    }

    fn signal(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.4).sin()).collect()
    }

    #[test]
    fn samples_are_valid() {
        let (m, store) = small(vec![], 9);
        let mut rng = stream(0, 1, 0);
        let x = signal(32);
        let mut tape = Tape::new(&store);
        let enc = m.encode(&mut tape, &store, &x).unwrap();
        for _ in 0..10_000 {
            let z = m.sample_prior_discrete(&store, &mut rng).unwrap();
            assert!(validate_expr(z.tokens(), 9).valid);
        }
        for _ in 0..2000 {
            let z = m.sample_discrete(&mut tape, &store, enc, &mut rng).unwrap();
            assert!(validate_expr(z.tokens(), 9).valid);
        }
    }

    /// Enumerates every prefix up to length `depth`; complete expressions
    /// contribute their probability, unfinished prefixes of full length their
    /// continuation mass.
    fn total_mass(depth: usize, lp: &dyn Fn(&[Token]) -> f64) -> f64 {
        fn go(
            prefix: &mut Vec<Token>,
            need: usize,
            depth: usize,
            lp: &dyn Fn(&[Token]) -> f64,
            acc: &mut f64,
        ) {
            if need == 0 || prefix.len() == depth {
                *acc += lp(prefix).exp();
                return;
            }
            for t in Token::all() {
                if t.is_operator() && !operator_allowed(need, prefix.len(), 9) {
                    continue;
                }
                prefix.push(t);
                go(prefix, need + t.arity() - 1, depth, lp, acc);
                prefix.pop();
            }
        }
        let mut acc = 0.0;
        go(&mut Vec::new(), 1, depth, lp, &mut acc);
        acc
    }

    #[test]
    fn short_strings_plus_continuation_sum_to_one() {
        let (m, store) = small(vec![], 9);
        let p = total_mass(3, &|t| m.prefix_log_prob(&store, t).unwrap());
        assert!((p - 1.0).abs() < 1e-6, "{p}");
        let x = signal(32);
        let q = total_mass(3, &|t| m.prefix_log_q(&store, &x, t).unwrap());
        assert!((q - 1.0).abs() < 1e-6, "{q}");
    }

    #[test]
    fn single_token_grammar_is_certain() {
        let (m, store) = small(vec!["WN".into()], 1);
        let z = KernelExpr::new(vec![WhiteNoise], 1).unwrap();
        let mut tape = Tape::new(&store);
        let lp = m.log_prior_discrete(&mut tape, &store, &z).unwrap();
        assert_eq!(tape.item(lp), 0.0);
        let enc = m.encode(&mut tape, &store, &signal(32)).unwrap();
        let lq = m.log_q_discrete(&mut tape, &store, enc, &z).unwrap();
        assert_eq!(tape.item(lq), 0.0);
        let z2 = m
            .sample_prior_discrete(&store, &mut stream(0, 0, 0))
            .unwrap();
        assert_eq!(z2, z);
    }

    #[test]
    fn log_joint_decomposes() {
        let (m, store) = small(vec![], 9);
        let z = KernelExpr::new(vec![Plus, SquaredExp, Periodic(4)], 9).unwrap();
        let zc = vec![0.1, -1.0, 0.3, -0.5, 0.2];
        let x = signal(32);
        let mut tape = Tape::new(&store);
        let zv = tape.constant(Tensor::vector(zc.clone()));
        let joint = model::log_joint(&m, &mut tape, &store, &z, zv, &x).unwrap();
        let prior = m.prefix_log_prob(&store, z.tokens()).unwrap();
        let (mean, log_std) = m.prior_continuous(&store, &z).unwrap();
        let cond: f64 = (0..5)
            .map(|i| crate::prob::normal_log_pdf(zc[i], mean[i], log_std[i].exp()))
            .sum();
        let lik = gp_log_marginal(&z, &zc, m.noise(&store), m.inputs(), &x).unwrap();
        assert!((tape.item(joint) - (prior + cond + lik)).abs() < 1e-9);
        assert_eq!(m.counters().likelihood(), 1);
    }

    #[test]
    fn period_buckets_shift_prior_means() {
        let (m, store) = small(vec![], 9);
        let z = KernelExpr::new(vec![Periodic(1)], 9).unwrap();
        let (mean, _) = m.prior_continuous(&store, &z).unwrap();
        assert!((softplus(mean[1]) - 0.05).abs() < 1e-9);
        let z = KernelExpr::new(vec![Periodic(10)], 9).unwrap();
        let (mean, _) = m.prior_continuous(&store, &z).unwrap();
        assert!((softplus(mean[1]) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn silent_embedding_reduces_recognition_to_prior_architecture() {
        let (m, mut store) = small(vec![], 9);
        let (w, b) = m.embedding_head_ids();
        for id in [w, b] {
            let shape = store.value(id).shape().to_vec();
            store.set_by_id(id, Tensor::zeros(&shape)).unwrap();
        }
        // Copy prior weights into the token part of the recognition net.
        let copy = |store: &mut ParamStore, from: &str, to: &str| {
            let v = store.get(from).unwrap().clone();
            store.set(to, v).unwrap();
        };
        for s in [
            "gru.wh", "gru.bx", "gru.bh", "logits.w", "logits.b", "heads.w", "heads.b",
        ] {
            copy(&mut store, &format!("gp.prior.{s}"), &format!("gp.rec.{s}"));
        }
        let pw = store.get("gp.prior.gru.wx").unwrap().data().to_vec();
        let mut rw = store.get("gp.rec.gru.wx").unwrap().clone();
        rw.data_mut()[..pw.len()].copy_from_slice(&pw);
        store.set("gp.rec.gru.wx", rw).unwrap();
        let mut table = store.get("gp.prior.table").unwrap().clone();
        let buckets = store.get("gp.prior.buckets").unwrap().data().to_vec();
        for (i, b) in buckets.iter().enumerate() {
            table.data_mut()[Periodic(i as u8 + 1).index() * HEAD + 1] += b;
        }
        store.set("gp.rec.table", table).unwrap();

        let x = signal(32);
        let z = KernelExpr::new(vec![Times, Periodic(3), Plus, Linear, WhiteNoise], 9).unwrap();
        let mut tape = Tape::new(&store);
        let enc = m.encode(&mut tape, &store, &x).unwrap();
        assert!(tape.value(enc).data().iter().all(|v| *v == 0.0));
        let lq = m.log_q_discrete(&mut tape, &store, enc, &z).unwrap();
        let lp = m.log_prior_discrete(&mut tape, &store, &z).unwrap();
        assert!((tape.item(lq) - tape.item(lp)).abs() < 1e-12);
        let (qm, qs) = m.q_continuous(&mut tape, &store, enc, &z).unwrap();
        let (pm, ps) = m.prior_continuous(&store, &z).unwrap();
        for (a, b) in tape.value(qm).data().iter().zip(&pm) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(tape.value(qs).data(), ps.as_slice());
    }

    #[test]
    fn keys_round_trip() {
        let (m, _) = small(vec![], 9);
        let a = KernelExpr::new(vec![Plus, SquaredExp, WhiteNoise], 9).unwrap();
        let b = KernelExpr::new(vec![Plus, WhiteNoise, SquaredExp], 9).unwrap();
        assert_eq!(m.canonical_key(&a), m.canonical_key(&a.clone()));
        assert_ne!(m.canonical_key(&a), m.canonical_key(&b));
        assert_eq!(m.from_key(&m.canonical_key(&b)), Some(b));
    }

    #[test]
    fn joint_samples_have_finite_likelihood() {
        let (m, store) = small(vec![], 9);
        let mut rng = stream(5, 0, 0);
        for _ in 0..20 {
            let (z, zc, x) = m.sample_joint(&store, &mut rng).unwrap();
            assert_eq!(zc.len(), z.num_params());
            assert!(gp_log_marginal(&z, &zc, m.noise(&store), m.inputs(), &x)
                .unwrap()
                .is_finite());
        }
    }

    #[test]
    fn reparameterized_gradient_reaches_recognition() {
        let (m, store) = small(vec![], 9);
        let x = signal(32);
        let z = KernelExpr::new(vec![Times, SquaredExp, Periodic(2)], 9).unwrap();
        let mut tape = Tape::new(&store);
        let enc = m.encode(&mut tape, &store, &x).unwrap();
        let (mean, ls) = m.q_continuous(&mut tape, &store, enc, &z).unwrap();
        let zc = model::reparam_continuous(&mut tape, mean, ls, &mut stream(0, 0, 0)).unwrap();
        let lp = model::log_joint(&m, &mut tape, &store, &z, zc, &x).unwrap();
        let g = tape.grad(&store, lp).unwrap();
        let rec = g.get(&store, "gp.rec.table").unwrap();
        assert!(rec.data().iter().any(|v| *v != 0.0));
        let noise = g.get(&store, "gp.noise").unwrap();
        assert!(noise.item() != 0.0);
    }
}
