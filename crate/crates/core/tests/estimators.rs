//! Monte Carlo checks of the gradient estimators against closed-form and
//! enumeration oracles on the conjugate testbed.

use hmws::ad::{adam_step, AdamConfig, AdamState, Gradients, ParamStore, Role, Tape, Tensor};
use hmws::baselines::{
    draw_particles, iwae_log_marginal, reinforce_from, rws_from, vimco_from, ContinuousGrad,
    Particle,
};
use hmws::hmws::{discrete_replay_grad, fantasy_grad, init_memory, wake_update, HmwsConfig};
use hmws::model::{self, HybridModel};
use hmws::prob::{
    normal_log_pdf, stream, Categorical, ConjugateTestbed, DiagonalGaussian, TestbedModel,
};
use proptest::prelude::*;

fn testbed() -> (TestbedModel, ParamStore, ConjugateTestbed) {
    let tb = ConjugateTestbed::new(vec![0.25, 0.45, 0.3], vec![-1.0, 0.2, 1.4], 0.7, 0.5).unwrap();
    let model = TestbedModel::new(3);
    let store = model.init_store(&tb).unwrap();
    (model, store, tb)
}

/// A recognition model that is neither flat nor exact.
fn skewed(model: &TestbedModel, store: &mut ParamStore) {
    model.set_exact_recognition(store).unwrap();
    for (name, shift) in [
        ("rec.disc.bias", 0.4),
        ("rec.cont.bias", 0.3),
        ("rec.cont.log_std", 0.2),
    ] {
        let v: Vec<f64> = store
            .get(name)
            .unwrap()
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + shift * (i as f64 - 1.0))
            .collect();
        store.set(name, Tensor::vector(v)).unwrap();
    }
}

fn total(out: &hmws::baselines::BaselineOutput, store: &ParamStore) -> Vec<f64> {
    let mut g = out.gen.clone();
    g.add_scaled(1.0, &out.rec);
    g.flatten(store)
}

fn role_mask(store: &ParamStore, role: Role) -> Vec<bool> {
    let mut mask = Vec::new();
    for id in 0..store.len() {
        mask.extend(std::iter::repeat(store.role(id) == role).take(store.value(id).len()));
    }
    mask
}

struct Moments {
    n: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Moments {
            n: 0.0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1.0;
        for ((s, q), x) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(v) {
            *s += x;
            *q += x * x;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n).collect()
    }

    fn var(&self) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| (q / self.n - (s / self.n).powi(2)) * self.n / (self.n - 1.0))
            .collect()
    }
}

#[test]
fn categorical_frequencies_within_three_standard_errors() {
    let c = Categorical::from_logits(vec![0.3, -1.2, 0.0, 1.1]).unwrap();
    let p = c.probs();
    let n = 100_000;
    let mut counts = [0usize; 4];
    let mut rng = stream(11, 0, 0);
    for _ in 0..n {
        counts[c.sample(&mut rng)] += 1;
    }
    for (k, &pk) in p.iter().enumerate() {
        let se = (pk * (1.0 - pk) / n as f64).sqrt();
        let f = counts[k] as f64 / n as f64;
        assert!((f - pk).abs() < 3.0 * se, "index {k}: {f} vs {pk}");
    }
}

#[test]
fn gaussian_sample_mean_within_three_standard_errors() {
    let g = DiagonalGaussian::new(vec![1.5, -0.4], vec![0.3, -1.0]).unwrap();
    let n = 100_000;
    let mut rng = stream(12, 0, 0);
    let mut m = Moments::new(2);
    for _ in 0..n {
        m.push(&g.sample(&mut rng));
    }
    for (i, (mean, std)) in m.mean().iter().zip(g.std()).enumerate() {
        let se = std / (n as f64).sqrt();
        assert!((mean - g.mean[i]).abs() < 3.0 * se);
    }
}

#[test]
fn reinforce_is_noisier_than_vimco() {
    let (model, mut store, _) = testbed();
    skewed(&model, &mut store);
    let x = 0.7;
    let rec = role_mask(&store, Role::Recognition);
    let dim = rec.len();
    let (mut r, mut v) = (Moments::new(dim), Moments::new(dim));
    for i in 0..10_000 {
        let p = draw_particles(&model, &store, &x, 10, &mut stream(13, 0, i)).unwrap();
        let mode = ContinuousGrad::Reparameterized;
        r.push(&total(
            &reinforce_from(&model, &store, &x, &p, mode).unwrap(),
            &store,
        ));
        v.push(&total(
            &vimco_from(&model, &store, &x, &p, mode).unwrap(),
            &store,
        ));
    }
    let trace = |m: &Moments| {
        m.var()
            .iter()
            .zip(&rec)
            .filter(|(_, &r)| r)
            .map(|(v, _)| v)
            .sum::<f64>()
    };
    let (tr, tv) = (trace(&r), trace(&v));
    assert!(tr > tv, "reinforce {tr} vs vimco {tv}");
}

#[test]
fn vimco_and_rws_share_the_expected_theta_gradient() {
    let (model, mut store, _) = testbed();
    skewed(&model, &mut store);
    let x = -0.3;
    let gen = role_mask(&store, Role::Generative);
    let dim = gen.len();
    let (mut a, mut b) = (Moments::new(dim), Moments::new(dim));
    for i in 0..100_000 {
        let p = draw_particles(&model, &store, &x, 5, &mut stream(14, 0, i)).unwrap();
        a.push(&total(
            &vimco_from(&model, &store, &x, &p, ContinuousGrad::Reparameterized).unwrap(),
            &store,
        ));
        let p = draw_particles(&model, &store, &x, 5, &mut stream(14, 1, i)).unwrap();
        b.push(&total(&rws_from(&model, &store, &x, &p).unwrap(), &store));
    }
    let (ma, mb, va, vb) = (a.mean(), b.mean(), a.var(), b.var());
    for j in (0..dim).filter(|&j| gen[j]) {
        let se = ((va[j] + vb[j]) / a.n).sqrt();
        assert!(
            (ma[j] - mb[j]).abs() < 4.0 * se + 1e-12,
            "slot {j}: {} vs {} (se {se})",
            ma[j],
            mb[j]
        );
    }
}

/// `−E_{p(z|x)}[∇_φ log q(z|x)]` by trapezoid quadrature over `z_c`.
fn posterior_score(
    model: &TestbedModel,
    store: &ParamStore,
    tb: &ConjugateTestbed,
    x: f64,
) -> Vec<f64> {
    let ex = tb.exact(x);
    let mut acc = vec![0.0; Gradients::zeros(store).flatten(store).len()];
    let h = 0.005;
    for (d, &pd) in ex.posterior.iter().enumerate() {
        for i in -2000..=2000 {
            let zc = ex.cond_mean[d] + ex.cond_std[d] * i as f64 * h;
            let w =
                pd * normal_log_pdf(zc, ex.cond_mean[d], ex.cond_std[d]).exp() * ex.cond_std[d] * h;
            let mut tape = Tape::new(store);
            let enc = model.encode(&mut tape, store, &x).unwrap();
            let lqd = model.log_q_discrete(&mut tape, store, enc, &d).unwrap();
            let (m, ls) = model.q_continuous(&mut tape, store, enc, &d).unwrap();
            let zv = tape.constant(Tensor::vector(vec![zc]));
            let lqc = model::log_q_continuous(&mut tape, m, ls, zv).unwrap();
            let lq = tape.add(lqd, lqc).unwrap();
            let g = tape
                .grad(store, lq)
                .unwrap()
                .restrict(store, Role::Recognition);
            for (a, v) in acc.iter_mut().zip(g.flatten(store)) {
                *a -= w * v;
            }
        }
    }
    acc
}

#[test]
fn rws_wake_phi_matches_posterior_expectation() {
    let (model, mut store, tb) = testbed();
    skewed(&model, &mut store);
    // Over-dispersed q(z_c | z_d, x) keeps the self-normalized weights light-tailed.
    let wide: Vec<f64> = store
        .get("rec.cont.log_std")
        .unwrap()
        .data()
        .iter()
        .map(|l| l + 0.3)
        .collect();
    store.set("rec.cont.log_std", Tensor::vector(wide)).unwrap();
    let x = 0.4;
    let oracle = posterior_score(&model, &store, &tb, x);
    let mut m = Moments::new(oracle.len());
    for i in 0..10 {
        let out = rws_from(
            &model,
            &store,
            &x,
            &draw_particles(&model, &store, &x, 10_000, &mut stream(15, 0, i)).unwrap(),
        )
        .unwrap();
        m.push(&out.rec.flatten(&store));
    }
    let est = m.mean();
    let err: f64 = est
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = oracle.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(norm > 0.1);
    assert!(
        err / norm < 0.02,
        "relative error {}: {est:?} vs {oracle:?}",
        err / norm
    );
}

#[test]
fn iwae_bound_grows_with_samples() {
    let (model, mut store, tb) = testbed();
    skewed(&model, &mut store);
    let x = 1.1;
    let exact = tb.exact(x).log_marginal;
    let mut stats = Vec::new();
    for s in [1usize, 10, 100] {
        let mut m = Moments::new(1);
        for i in 0..10_000 {
            m.push(&[
                iwae_log_marginal(&model, &store, &x, s, &mut stream(16, s as u64, i)).unwrap(),
            ]);
        }
        stats.push((m.mean()[0], (m.var()[0] / m.n).sqrt()));
    }
    for w in stats.windows(2) {
        let ((a, sa), (b, sb)) = (w[0], w[1]);
        assert!(b > a - 2.0 * (sa * sa + sb * sb).sqrt(), "{stats:?}");
    }
    assert!(stats[2].0 <= exact + 2.0 * stats[2].1);
    assert!(stats[0].0 < stats[2].0);
}

#[test]
fn discrete_replay_with_exact_omega_recovers_posterior() {
    let (model, mut store, tb) = testbed();
    let x = 0.9;
    let posterior = tb.exact(x).posterior;
    let cfg = HmwsConfig {
        memory_size: 3,
        proposals: 1,
        importance_samples: 1,
        replay_factor: 1.0,
    };
    let mem = init_memory(&model, &store, &x, 3, &mut stream(17, 0, 0)).unwrap();
    assert_eq!(mem.len(), 3);
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
    );
    for it in 0..3000 {
        let (_, mut wake) =
            wake_update(&model, &store, &x, &mem, &cfg, &mut stream(17, 1, it)).unwrap();
        let omega: Vec<f64> = wake.latents.iter().map(|&d| posterior[d]).collect();
        wake.weights.omega = omega;
        let g = discrete_replay_grad(&model, &store, &mut wake).unwrap();
        adam_step(&mut store, &g, &mut adam);
    }
    let q = model.q_discrete_probs(&store, x).unwrap();
    let tv: f64 = 0.5
        * q.iter()
            .zip(&posterior)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    assert!(tv < 1e-3, "tv {tv}: {q:?} vs {posterior:?}");
}

#[test]
fn fantasy_trained_bias_matches_averaged_posterior() {
    let (model, mut store, tb) = testbed();
    // With the slope pinned at zero q(z_d | x) cannot depend on x, and the
    // fantasy objective is minimized by E_{p(x)}[p(z_d | x)].
    let h = 0.002;
    let mut oracle = vec![0.0; 3];
    for i in -10_000..=10_000 {
        let x = i as f64 * h;
        let ex = tb.exact(x);
        let px = ex.log_marginal.exp() * h;
        for (o, p) in oracle.iter_mut().zip(&ex.posterior) {
            *o += px * p;
        }
    }
    for t in 0..2000u64 {
        let g = fantasy_grad(&model, &store, 1000, &mut stream(18, 0, t)).unwrap();
        let gb = g.get(&store, "rec.disc.bias").unwrap();
        let a = 5.0 / (t as f64 + 5.0);
        let b: Vec<f64> = store
            .get("rec.disc.bias")
            .unwrap()
            .data()
            .iter()
            .zip(gb.data())
            .map(|(b, g)| b - a * g)
            .collect();
        store.set("rec.disc.bias", Tensor::vector(b)).unwrap();
    }
    let q = model.q_discrete_probs(&store, 0.0).unwrap();
    let tv: f64 = 0.5
        * q.iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    assert!(tv < 1e-3, "tv {tv}: {q:?} vs {oracle:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn baselines_ignore_particle_order(seed in 0u64..1000, x in -2.0f64..2.0, rot in 1usize..6) {
        let (model, mut store, _) = testbed();
        skewed(&model, &mut store);
        let p = draw_particles(&model, &store, &x, 6, &mut stream(19, seed, 0)).unwrap();
        let mut shuffled: Vec<Particle<usize>> = p.clone();
        shuffled.rotate_left(rot);
        shuffled.swap(0, 5);
        for mode in [ContinuousGrad::ScoreFunction, ContinuousGrad::Reparameterized] {
            let pairs = [
                (reinforce_from(&model, &store, &x, &p, mode).unwrap(), reinforce_from(&model, &store, &x, &shuffled, mode).unwrap()),
                (vimco_from(&model, &store, &x, &p, mode).unwrap(), vimco_from(&model, &store, &x, &shuffled, mode).unwrap()),
                (rws_from(&model, &store, &x, &p).unwrap(), rws_from(&model, &store, &x, &shuffled).unwrap()),
            ];
            for (a, b) in &pairs {
                for (u, v) in total(a, &store).iter().zip(total(b, &store)) {
                    prop_assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
                }
            }
        }
    }
}
