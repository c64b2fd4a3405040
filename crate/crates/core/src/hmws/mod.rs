//! Hybrid memoised wake-sleep.
//!
//! One learning iteration for a datapoint `x`:
//!
//! 1. **Wake.** Propose `N` discrete latents from `q(z_d | x)`, merge them with
//!    the `M` memory entries, score every candidate by importance sampling
//!    over `z_c` with `K` draws from `q(z_c | z_d, x)` and keep the best `M`.
//! 2. **Replay.** Reuse the wake weights for the generative gradient and for
//!    both recognition factors.
//! 3. **Fantasy.** Train the recognition model on samples from the model.
//!
//! The recognition gradient mixes replay and fantasy with the replay factor `λ`.

mod grads;
mod memory;
mod wake;

use serde::{Deserialize, Serialize};

use crate::ad::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::prob::StreamRng;

pub use grads::{
    continuous_replay_grad, discrete_replay_grad, fantasy_grad, gen_grad, replay_grads,
};
pub use memory::{init_memory, Memory};
pub use wake::{memory_elbo, wake_update, WakeResult, WakeWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmwsConfig {
    /// `M`.
    pub memory_size: usize,
    /// `N`.
    pub proposals: usize,
    /// `K`.
    pub importance_samples: usize,
    /// `λ`.
    pub replay_factor: f64,
}

impl Default for HmwsConfig {
    fn default() -> Self {
        HmwsConfig {
            memory_size: 2,
            proposals: 8,
            importance_samples: 3,
            replay_factor: 0.5,
        }
    }
}

impl HmwsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_size == 0 || self.proposals == 0 || self.importance_samples == 0 {
            return Err(Error::Config("M, N and K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_factor) {
            return Err(Error::Config(format!(
                "replay factor {} outside [0, 1]",
                self.replay_factor
            )));
        }
        Ok(())
    }

    /// Likelihood evaluations per datapoint and iteration, `K (N + M)`.
    pub fn budget(&self) -> usize {
        self.importance_samples * (self.proposals + self.memory_size)
    }
}

/// Gradients and updated memory for one datapoint.
pub struct StepOutput<Z> {
    pub gen: Gradients,
    /// Replay part already scaled by `λ`; fantasy part included by
    /// [`hmws_step`] but not by [`replay_step`].
    pub rec: Gradients,
    pub memory: Memory<Z>,
    /// Degenerate wake phase or non-finite gradient; gradients are zero.
    pub skipped: bool,
    pub wake: WakeResult<Z>,
}

/// Wake phase and replay gradients for one datapoint.
pub fn replay_step<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    memory: &Memory<M::Discrete>,
    config: &HmwsConfig,
    rng: &mut StreamRng,
) -> Result<StepOutput<M::Discrete>> {
    config.validate()?;
    let (new_memory, mut wake) = wake_update(model, store, x, memory, config, rng)?;
    let skip = |wake| StepOutput {
        gen: Gradients::zeros(store),
        rec: Gradients::zeros(store),
        memory: memory.clone(),
        skipped: true,
        wake,
    };
    if wake.degenerate {
        return Ok(skip(wake));
    }
    let (gen, rec) = match replay_grads(model, store, &mut wake, config.replay_factor) {
        Ok(g) => g,
        Err(Error::NonFinite { op }) => {
            log::debug!("non-finite value in `{op}` during replay; datapoint skipped");
            return Ok(skip(wake));
        }
        Err(e) => return Err(e),
    };
    wake.trace = None;
    if !gen.is_finite() || !rec.is_finite() {
        return Ok(skip(wake));
    }
    Ok(StepOutput {
        gen,
        rec,
        memory: new_memory,
        skipped: false,
        wake,
    })
}

/// A full learning iteration for one datapoint.
///
/// `g_φ = λ (g_replay,d + g_replay,c) + (1 − λ) g_fantasy`, with the fantasy
/// average over `K` samples. With `λ = 1` no fantasy samples are drawn.
pub fn hmws_step<M: HybridModel>(
    model: &M,
    store: &ParamStore,
    x: &M::Obs,
    memory: &Memory<M::Discrete>,
    config: &HmwsConfig,
    rng: &mut StreamRng,
) -> Result<StepOutput<M::Discrete>> {
    let mut out = replay_step(model, store, x, memory, config, rng)?;
    if out.skipped {
        return Ok(out);
    }
    let lambda = config.replay_factor;
    if lambda < 1.0 {
        let f = fantasy_grad(model, store, config.importance_samples, rng)?;
        if f.is_finite() {
            out.rec.add_scaled(1.0 - lambda, &f);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{adam_step, AdamConfig, AdamState, Role, Tape, Tensor};
    use crate::prob::{stream, ConjugateTestbed, TestbedModel};

    fn testbed() -> (TestbedModel, ParamStore) {
        let tb =
            ConjugateTestbed::new(vec![0.2, 0.5, 0.3], vec![-1.5, 0.0, 1.5], 0.6, 0.5).unwrap();
        let model = TestbedModel::new(3);
        let store = model.init_store(&tb).unwrap();
        (model, store)
    }

    fn config(m: usize, n: usize, k: usize, lambda: f64) -> HmwsConfig {
        HmwsConfig {
            memory_size: m,
            proposals: n,
            importance_samples: k,
            replay_factor: lambda,
        }
    }

    fn close(a: &Gradients, b: &Gradients, store: &ParamStore, tol: f64) -> bool {
        a.flatten(store)
            .iter()
            .zip(b.flatten(store))
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    #[test]
    fn single_sample_gen_grad_is_negative_joint_gradient() {
        let (model, store) = testbed();
        let mut rng = stream(1, 0, 0);
        let x = 0.4;
        let mem = init_memory(&model, &store, &x, 1, &mut rng).unwrap();
        let (_, mut wake) =
            wake_update(&model, &store, &x, &mem, &config(1, 1, 1, 0.5), &mut rng).unwrap();
        let g = gen_grad(&model, &store, &mut wake).unwrap();

        let mut tape = Tape::new(&store);
        let zc = tape.constant(Tensor::vector(wake.continuous[0][0].clone()));
        let lp =
            crate::model::log_joint(&model, &mut tape, &store, &wake.latents[0], zc, &x).unwrap();
        let mut expected = tape.grad(&store, lp).unwrap();
        expected.scale(-1.0);
        assert!(close(&g, &expected, &store, 1e-12));
        assert!(g.iter().all(|(id, _)| store.role(id) == Role::Generative));
    }

    #[test]
    fn single_entry_discrete_replay() {
        let (model, store) = testbed();
        let mut rng = stream(2, 0, 0);
        let x = -0.3;
        let mem = init_memory(&model, &store, &x, 1, &mut rng).unwrap();
        let (_, mut wake) =
            wake_update(&model, &store, &x, &mem, &config(1, 2, 3, 0.5), &mut rng).unwrap();
        let g = discrete_replay_grad(&model, &store, &mut wake).unwrap();
        let mut tape = Tape::new(&store);
        let enc = model.encode(&mut tape, &store, &x).unwrap();
        let lq = model
            .log_q_discrete(&mut tape, &store, enc, &wake.latents[0])
            .unwrap();
        let mut expected = tape.grad(&store, lq).unwrap();
        expected.scale(-1.0);
        assert!(close(&g, &expected, &store, 1e-12));
    }

    #[test]
    fn matched_uniform_q_has_stationary_discrete_replay() {
        let tb = ConjugateTestbed::new(vec![0.5, 0.5], vec![-1.0, 1.0], 0.5, 0.5).unwrap();
        let model = TestbedModel::new(2);
        let mut store = model.init_store(&tb).unwrap();
        model.set_exact_recognition(&mut store).unwrap();
        let mut rng = stream(3, 0, 0);
        let mem = init_memory(&model, &store, &0.0, 2, &mut rng).unwrap();
        let (_, mut wake) =
            wake_update(&model, &store, &0.0, &mem, &config(2, 1, 1, 0.5), &mut rng).unwrap();
        assert!((wake.omega()[0] - 0.5).abs() < 1e-12);
        let g = discrete_replay_grad(&model, &store, &mut wake).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn continuous_replay_single_sample_average() {
        let (model, store) = testbed();
        let mut rng = stream(4, 0, 0);
        let x = 0.9;
        let mem = init_memory(&model, &store, &x, 2, &mut rng).unwrap();
        let (_, mut wake) =
            wake_update(&model, &store, &x, &mem, &config(2, 3, 1, 0.5), &mut rng).unwrap();
        let g = continuous_replay_grad(&store, &mut wake).unwrap();
        let mut expected = Gradients::zeros(&store);
        for (z, zc) in wake.latents.iter().zip(&wake.continuous) {
            let mut tape = Tape::new(&store);
            let enc = model.encode(&mut tape, &store, &x).unwrap();
            let (m, ls) = model.q_continuous(&mut tape, &store, enc, z).unwrap();
            let v = tape.constant(Tensor::vector(zc[0].clone()));
            let lq = crate::model::log_q_continuous(&mut tape, m, ls, v).unwrap();
            expected.add_scaled(-0.5, &tape.grad(&store, lq).unwrap());
        }
        assert!(close(&g, &expected, &store, 1e-12));
    }

    #[test]
    fn combined_replay_matches_parts() {
        let (model, store) = testbed();
        let x = 0.2;
        let cfg = config(2, 4, 3, 0.3);
        let mem = init_memory(&model, &store, &x, 2, &mut stream(5, 0, 0)).unwrap();
        let run = |f: &dyn Fn(&mut WakeResult<usize>) -> Gradients| {
            let (_, mut w) =
                wake_update(&model, &store, &x, &mem, &cfg, &mut stream(6, 0, 0)).unwrap();
            f(&mut w)
        };
        let gen = run(&|w| gen_grad(&model, &store, w).unwrap());
        let gd = run(&|w| discrete_replay_grad(&model, &store, w).unwrap());
        let gc = run(&|w| continuous_replay_grad(&store, w).unwrap());
        let (g2, r2) = {
            let (_, mut w) =
                wake_update(&model, &store, &x, &mem, &cfg, &mut stream(6, 0, 0)).unwrap();
            replay_grads(&model, &store, &mut w, 0.3).unwrap()
        };
        let mut rec = gd;
        rec.add_scaled(1.0, &gc);
        rec.scale(0.3);
        assert!(close(&g2, &gen, &store, 1e-12));
        assert!(close(&r2, &rec, &store, 1e-12));
    }

    #[test]
    fn fantasy_touches_only_recognition() {
        let (model, store) = testbed();
        let g = fantasy_grad(&model, &store, 1, &mut stream(7, 0, 0)).unwrap();
        assert!(!g.is_empty());
        assert!(g.iter().all(|(id, _)| store.role(id) == Role::Recognition));
    }

    #[test]
    fn replay_factor_endpoints() {
        let (model, store) = testbed();
        let x = 0.1;
        let mem = init_memory(&model, &store, &x, 2, &mut stream(8, 0, 0)).unwrap();

        let full = hmws_step(
            &model,
            &store,
            &x,
            &mem,
            &config(2, 3, 2, 1.0),
            &mut stream(9, 0, 0),
        )
        .unwrap();
        let replay = replay_step(
            &model,
            &store,
            &x,
            &mem,
            &config(2, 3, 2, 1.0),
            &mut stream(9, 0, 0),
        )
        .unwrap();
        assert!(close(&full.rec, &replay.rec, &store, 0.0));

        let cfg0 = config(2, 3, 2, 0.0);
        let mut rng = stream(10, 0, 0);
        let out = hmws_step(&model, &store, &x, &mem, &cfg0, &mut rng).unwrap();
        // Replay the same stream: the wake consumes draws, then fantasy.
        let mut rng2 = stream(10, 0, 0);
        let r = replay_step(&model, &store, &x, &mem, &cfg0, &mut rng2).unwrap();
        assert!(r.rec.is_empty());
        let f = fantasy_grad(&model, &store, 2, &mut rng2).unwrap();
        assert!(close(&out.rec, &f, &store, 1e-12));
    }

    #[test]
    fn step_respects_budget() {
        let (model, store) = testbed();
        let x = 0.0;
        let cfg = config(2, 8, 3, 0.5);
        let mem = init_memory(&model, &store, &x, 2, &mut stream(11, 0, 0)).unwrap();
        let before = model.counters().likelihood();
        let p0 = model.counters().discrete_prior();
        hmws_step(&model, &store, &x, &mem, &cfg, &mut stream(12, 0, 0)).unwrap();
        assert!(model.counters().likelihood() - before <= cfg.budget() as u64);
        assert!(model.counters().discrete_prior() - p0 <= 10);
    }

    #[test]
    fn invalid_configs() {
        assert!(config(0, 1, 1, 0.5).validate().is_err());
        assert!(config(1, 1, 1, 1.5).validate().is_err());
        assert_eq!(config(2, 8, 3, 0.5).budget(), 30);
        assert_eq!(config(5, 5, 5, 0.5).budget(), 50);
    }

    #[test]
    fn continuous_replay_learns_conditional_posterior() {
        let tb = ConjugateTestbed::new(vec![1.0], vec![0.5], 0.8, 0.6).unwrap();
        let model = TestbedModel::new(1);
        let mut store = model.init_store(&tb).unwrap();
        let x = 1.3;
        let exact = tb.exact(x);
        let mut adam = AdamState::new(
            &store,
            AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
        );
        let cfg = config(1, 1, 50, 1.0);
        let mut mem = init_memory(&model, &store, &x, 1, &mut stream(13, 0, 0)).unwrap();
        for it in 0..3000 {
            if it == 2000 {
                adam.config.lr = 0.002;
            }
            let out = replay_step(&model, &store, &x, &mem, &cfg, &mut stream(13, 0, it)).unwrap();
            mem = out.memory;
            adam_step(&mut store, &out.rec, &mut adam);
        }
        let mut tape = Tape::new(&store);
        let enc = model.encode(&mut tape, &store, &x).unwrap();
        let (m, ls) = model.q_continuous(&mut tape, &store, enc, &0).unwrap();
        let (m, s) = (tape.item(m), tape.item(ls).exp());
        assert!(
            (m - exact.cond_mean[0]).abs() < 0.02 * exact.cond_mean[0].abs(),
            "{m} vs {}",
            exact.cond_mean[0]
        );
        assert!(
            (s - exact.cond_std[0]).abs() < 0.02 * exact.cond_std[0],
            "{s} vs {}",
            exact.cond_std[0]
        );
    }
}
