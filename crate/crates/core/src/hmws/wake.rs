use std::collections::HashSet;

use super::{HmwsConfig, Memory};
use crate::ad::{log_sum_exp, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{self, HybridModel};
use crate::prob::StreamRng;

/// Weights derived from an `M × K` matrix of log importance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WakeWeights {
    /// `log p̂_m = logsumexp_k log w_mk − log K`.
    pub log_p_hat: Vec<f64>,
    /// `ω_m ∝ p̂_m`.
    pub omega: Vec<f64>,
    /// `w̄_mk = w_mk / Σ_i w_mi`.
    pub w_bar: Vec<Vec<f64>>,
    /// `v_mk = w_mk / Σ_{m,i} w_mi`.
    pub v: Vec<Vec<f64>>,
}

impl WakeWeights {
    /// Rows that are entirely `-inf` get `ω = 0` and zero `w̄`, `v`.
    pub fn from_log_weights(log_w: &[Vec<f64>]) -> Result<Self> {
        if log_w.is_empty() || log_w.iter().any(|r| r.is_empty()) {
            return Err(Error::EmptySamples);
        }
        let row_lse: Vec<f64> = log_w.iter().map(|r| log_sum_exp(r)).collect();
        let log_p_hat: Vec<f64> = row_lse
            .iter()
            .zip(log_w)
            .map(|(l, r)| l - (r.len() as f64).ln())
            .collect();
        let total_p = log_sum_exp(&log_p_hat);
        let total_w = log_sum_exp(&row_lse);
        if total_p == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights);
        }
        if !total_p.is_finite() {
            return Err(Error::NonFinite { op: "wake weights" });
        }
        let omega = log_p_hat.iter().map(|l| (l - total_p).exp()).collect();
        let norm = |r: &Vec<f64>, z: f64| -> Vec<f64> {
            if z == f64::NEG_INFINITY {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|l| (l - z).exp()).collect()
            }
        };
        let w_bar = log_w
            .iter()
            .zip(&row_lse)
            .map(|(r, &z)| norm(r, z))
            .collect();
        let v = log_w.iter().map(|r| norm(r, total_w)).collect();
        Ok(WakeWeights {
            log_p_hat,
            omega,
            w_bar,
            v,
        })
    }
}

/// Recorded computation of the retained candidates, reused by the gradients.
pub(crate) struct WakeTrace {
    pub tape: Tape,
    pub enc: Var,
    /// `log p(z_d^m, z_c^{mk}, x)` per retained `(m, k)`.
    pub log_joint: Vec<Vec<Var>>,
    /// `log q(z_c^{mk} | z_d^m, x)` per retained `(m, k)`.
    pub log_qc: Vec<Vec<Var>>,
}

/// Outcome of a wake phase for one datapoint.
pub struct WakeResult<Z> {
    /// Retained discrete latents, best first.
    pub latents: Vec<Z>,
    /// `z_c^{mk}`.
    pub continuous: Vec<Vec<Vec<f64>>>,
    /// `log w_mk`.
    pub log_w: Vec<Vec<f64>>,
    pub weights: WakeWeights,
    /// Every candidate scored `-inf`; no gradients should be taken.
    pub degenerate: bool,
    pub(crate) trace: Option<WakeTrace>,
}

impl<Z> WakeResult<Z> {
    fn degenerate() -> Self {
        WakeResult {
            latents: Vec::new(),
            continuous: Vec::new(),
            log_w: Vec::new(),
            weights: WakeWeights {
                log_p_hat: Vec::new(),
                omega: Vec::new(),
                w_bar: Vec::new(),
                v: Vec::new(),
            },
            degenerate: true,
            trace: None,
        }
    }

    pub fn omega(&self) -> &[f64] {
        &self.weights.omega
    }

    pub fn log_p_hat(&self) -> &[f64] {
        &self.weights.log_p_hat
    }
}

struct Scored {
    log_joint: Vec<Var>,
    log_qc: Vec<Var>,
    zc: Vec<Vec<f64>>,
    log_w: Vec<f64>,
    log_p_hat: f64,
}

/// Proposes, scores and selects the best `M` discrete latents.
///
/// Candidates are the memory entries followed by `N` fresh draws from
/// `q(z_d | x)`, deduplicated. Each candidate gets `K` draws from
/// `q(z_c | z_d, x)`. Selection is a stable sort on `log p̂`, so memory entries
/// win ties. If every candidate scores `-inf` the memory is returned unchanged
/// and the result is flagged degenerate.
pub fn wake_update<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    memory: &Memory<M::Discrete>,
    config: &HmwsConfig,
    rng: &mut StreamRng,
) -> Result<(Memory<M::Discrete>, WakeResult<M::Discrete>)> {
    let mut tape = Tape::new(store);
    let enc = model.encode(&mut tape, store, x)?;

    let mut seen = HashSet::new();
    let mut candidates = Vec::with_capacity(memory.len() + config.proposals);
    for z in &memory.entries {
        if seen.insert(model.canonical_key(z)) {
            candidates.push(z.clone());
        }
    }
    for _ in 0..config.proposals {
        let z = model.sample_discrete(&mut tape, store, enc, rng)?;
        if seen.insert(model.canonical_key(&z)) {
            candidates.push(z);
        }
    }

    let k = config.importance_samples;
    let mut scored = Vec::with_capacity(candidates.len());
    for z in &candidates {
        let (mean, log_std) = model.q_continuous(&mut tape, store, enc, z)?;
        let draws = model::sample_continuous(&tape, mean, log_std, k, rng);
        let prior = model::log_prior_discrete(model, &mut tape, store, z)?;
        let mut s = Scored {
            log_joint: Vec::with_capacity(k),
            log_qc: Vec::with_capacity(k),
            zc: Vec::with_capacity(k),
            log_w: Vec::with_capacity(k),
            log_p_hat: 0.0,
        };
        for zc in draws {
            let zv = tape.constant(Tensor::vector(zc.clone()));
            let cond = model::log_conditional(model, &mut tape, store, z, zv, x)?;
            let lp = tape.add(prior, cond)?;
            let lq = model::log_q_continuous(&mut tape, mean, log_std, zv)?;
            let lw = tape.item(lp) - tape.item(lq);
            s.log_w
                .push(if lw.is_nan() { f64::NEG_INFINITY } else { lw });
            s.log_joint.push(lp);
            s.log_qc.push(lq);
            s.zc.push(zc);
        }
        s.log_p_hat = log_sum_exp(&s.log_w) - (k as f64).ln();
        scored.push(s);
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scored[b].log_p_hat.total_cmp(&scored[a].log_p_hat));
    if order.is_empty() || scored[order[0]].log_p_hat == f64::NEG_INFINITY {
        return Ok((memory.clone(), WakeResult::degenerate()));
    }
    order.truncate(config.memory_size);

    let mut slots: Vec<Option<Scored>> = scored.into_iter().map(Some).collect();
    let mut latents = Vec::with_capacity(order.len());
    let mut continuous = Vec::with_capacity(order.len());
    let mut log_w = Vec::with_capacity(order.len());
    let mut log_joint = Vec::with_capacity(order.len());
    let mut log_qc = Vec::with_capacity(order.len());
    for &i in &order {
        let s = slots[i].take().expect("indices are distinct");
        latents.push(candidates[i].clone());
        continuous.push(s.zc);
        log_w.push(s.log_w);
        log_joint.push(s.log_joint);
        log_qc.push(s.log_qc);
    }
    let weights = WakeWeights::from_log_weights(&log_w)?;
    let new_memory = Memory {
        entries: latents.clone(),
        degenerate: latents.len() < config.memory_size,
    };
    let result = WakeResult {
        latents,
        continuous,
        log_w,
        weights,
        degenerate: false,
        trace: Some(WakeTrace {
            tape,
            enc,
            log_joint,
            log_qc,
        }),
    };
    Ok((new_memory, result))
}

/// `Σ_m ω_m (log p_m − log ω_m)`, the evidence lower bound of the weighted
/// delta-mass posterior. Zero-weight elements contribute nothing.
pub fn memory_elbo(log_p: &[f64], omega: &[f64]) -> Result<f64> {
    if log_p.len() != omega.len() {
        return Err(Error::LengthMismatch(log_p.len(), omega.len()));
    }
    Ok(log_p
        .iter()
        .zip(omega)
        .filter(|(_, w)| **w > 0.0)
        .map(|(lp, w)| w * (lp - w.ln()))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmws::init_memory;
    use crate::prob::{stream, ConjugateTestbed, TestbedModel};
    use proptest::prelude::*;

    fn ln(m: &[[f64; 2]]) -> Vec<Vec<f64>> {
        m.iter()
            .map(|r| r.iter().map(|v| v.ln()).collect())
            .collect()
    }

    #[test]
    fn two_by_two_weights() {
        let w = WakeWeights::from_log_weights(&ln(&[[1.0, 3.0], [2.0, 2.0]])).unwrap();
        for (lp, e) in w.log_p_hat.iter().zip([2.0f64, 2.0]) {
            assert!((lp - e.ln()).abs() < 1e-15);
        }
        assert!((w.omega[0] - 0.5).abs() < 1e-15 && (w.omega[1] - 0.5).abs() < 1e-15);
        assert!((w.w_bar[0][0] - 0.25).abs() < 1e-15 && (w.w_bar[0][1] - 0.75).abs() < 1e-15);
        let v = [[0.125, 0.375], [0.25, 0.25]];
        for m in 0..2 {
            for k in 0..2 {
                assert!((w.v[m][k] - v[m][k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dead_row_gets_no_weight() {
        let lw = vec![vec![0.0, 1.0], vec![f64::NEG_INFINITY; 2]];
        let w = WakeWeights::from_log_weights(&lw).unwrap();
        assert_eq!(w.omega[1], 0.0);
        assert_eq!(w.w_bar[1], vec![0.0, 0.0]);
        assert!(matches!(
            WakeWeights::from_log_weights(&[vec![f64::NEG_INFINITY]]),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn elbo_cases() {
        assert!((memory_elbo(&[-3.2], &[1.0]).unwrap() + 3.2).abs() < 1e-15);
        let e = memory_elbo(&[-1.0, -1.0], &[0.5, 0.5]).unwrap();
        assert!((e - (-1.0 + 2f64.ln())).abs() < 1e-15);
        let z = memory_elbo(&[f64::NEG_INFINITY, -1.0], &[0.0, 1.0]).unwrap();
        assert!((z + 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weight_identities(
            rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 1..6), 1..6),
            shift in -50.0f64..50.0,
        ) {
            let k = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(k, 0.0); r }).collect();
            let w = WakeWeights::from_log_weights(&rows).unwrap();
            prop_assert!((w.omega.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut total = 0.0;
            for m in 0..rows.len() {
                prop_assert!((w.w_bar[m].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for j in 0..k {
                    let prod = w.w_bar[m][j] * w.omega[m];
                    prop_assert!((w.v[m][j] - prod).abs() <= 1e-12 * prod.max(1e-300) + 1e-300);
                    total += w.v[m][j];
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-9);

            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let s = WakeWeights::from_log_weights(&shifted).unwrap();
            for m in 0..rows.len() {
                prop_assert!((s.omega[m] - w.omega[m]).abs() < 1e-12);
                for j in 0..k {
                    prop_assert!((s.w_bar[m][j] - w.w_bar[m][j]).abs() < 1e-12);
                    prop_assert!((s.v[m][j] - w.v[m][j]).abs() < 1e-12);
                }
            }
        }
    }

    fn testbed() -> (TestbedModel, ParamStore, ConjugateTestbed) {
        let tb = ConjugateTestbed::new(
            vec![0.1, 0.2, 0.3, 0.15, 0.25],
            vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            0.7,
            0.4,
        )
        .unwrap();
        let model = TestbedModel::new(5);
        let store = model.init_store(&tb).unwrap();
        (model, store, tb)
    }

    fn config(m: usize, n: usize, k: usize) -> HmwsConfig {
        HmwsConfig {
            memory_size: m,
            proposals: n,
            importance_samples: k,
            replay_factor: 0.5,
        }
    }

    #[test]
    fn memory_stays_unique_and_full() {
        let (model, store, _) = testbed();
        let mut rng = stream(5, 0, 0);
        let mut mem = init_memory(&model, &store, &0.3, 3, &mut rng).unwrap();
        for _ in 0..50 {
            let (m, r) =
                wake_update(&model, &store, &0.3, &mem, &config(3, 4, 5), &mut rng).unwrap();
            assert_eq!(m.len(), 3);
            let keys: HashSet<_> = m.keys(&model).into_iter().collect();
            assert_eq!(keys.len(), 3);
            assert!(r.log_p_hat().windows(2).all(|w| w[0] >= w[1]));
            mem = m;
        }
    }

    #[test]
    fn exact_recognition_scores_are_exact() {
        let (model, mut store, tb) = testbed();
        model.set_exact_recognition(&mut store).unwrap();
        let x = 0.8;
        let exact = tb.exact(x);
        let mut rng = stream(6, 0, 0);
        let mem = init_memory(&model, &store, &x, 5, &mut rng).unwrap();
        let (_, r) = wake_update(&model, &store, &x, &mem, &config(5, 3, 4), &mut rng).unwrap();
        for (z, lp) in r.latents.iter().zip(r.log_p_hat()) {
            assert!((lp - exact.log_joint[*z]).abs() < 1e-10);
        }
        let mut sorted = exact.log_joint.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in r.log_p_hat().iter().zip(&sorted) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn large_k_estimates_joint() {
        let (model, store, tb) = testbed();
        let x = -0.5;
        let exact = tb.exact(x);
        let mut rng = stream(7, 0, 0);
        let mem = init_memory(&model, &store, &x, 3, &mut rng).unwrap();
        let (_, r) =
            wake_update(&model, &store, &x, &mem, &config(3, 2, 10_000), &mut rng).unwrap();
        for (z, lp) in r.latents.iter().zip(r.log_p_hat()) {
            let e = exact.log_joint[*z];
            assert!((lp - e).abs() < 0.01 * e.abs(), "{lp} vs {e}");
        }
    }

    #[test]
    fn repeated_proposals_leave_memory_unchanged() {
        let (model, mut store, _) = testbed();
        model.set_exact_recognition(&mut store).unwrap();
        let x = 0.1;
        let mut rng = stream(8, 0, 0);
        let full = Memory {
            entries: vec![0, 1, 2, 3, 4],
            degenerate: false,
        };
        let (m, _) = wake_update(&model, &store, &x, &full, &config(5, 6, 2), &mut rng).unwrap();
        let a: HashSet<_> = m.entries.iter().collect();
        let b: HashSet<_> = full.entries.iter().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn likelihood_budget() {
        let (model, store, _) = testbed();
        let mut rng = stream(9, 0, 0);
        let mem = init_memory(&model, &store, &0.0, 2, &mut rng).unwrap();
        let before = (
            model.counters().likelihood(),
            model.counters().discrete_prior(),
        );
        wake_update(&model, &store, &0.0, &mem, &config(2, 8, 3), &mut rng).unwrap();
        let lik = model.counters().likelihood() - before.0;
        let prior = model.counters().discrete_prior() - before.1;
        assert!(lik <= 30 && lik % 3 == 0, "{lik}");
        assert!(prior <= 10);
    }
}
