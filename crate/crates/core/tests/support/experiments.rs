//! Wall-clock-matched training comparisons behind criteria 7 and 8.
//!
//! Budgets default to a desk-scale setting and can be raised with
//! `HMWS_TS_BUDGET_S` and `HMWS_BLOCKS_BUDGET_S` (seconds per run).

use hmws::blocks::{Blocks2DConfig, BlocksModel};
use hmws::harness::{
    latest_checkpoint, reconstruct_scene, train, Domain, Method, RunConfig, Session,
};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const METHODS: [Method; 4] = [Method::Hmws, Method::Rws, Method::Vimco, Method::Reinforce];

fn budget(var: &str, default: f64) -> f64 {
    std::env::var(var)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

struct Run {
    method: Method,
    final_median: f64,
    iterations: u64,
}

fn run_all(base: &RunConfig, mut after: impl FnMut(&RunConfig, Method)) -> Vec<Run> {
    let mut runs = Vec::new();
    for &seed in &SEEDS {
        for &method in &METHODS {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.seed = seed;
            cfg.output = dir.path().to_path_buf();
            let s = train(&cfg, None).unwrap();
            runs.push(Run {
                method,
                final_median: s.last.logp_median,
                iterations: s.iterations,
            });
            after(&cfg, method);
        }
    }
    runs
}

fn per_method(runs: &[Run], m: Method) -> (f64, u64) {
    let v: Vec<f64> = runs
        .iter()
        .filter(|r| r.method == m)
        .map(|r| r.final_median)
        .collect();
    let its: Vec<f64> = runs
        .iter()
        .filter(|r| r.method == m)
        .map(|r| r.iterations as f64)
        .collect();
    (median(&v), median(&its) as u64)
}

fn summary(runs: &[Run]) -> String {
    METHODS
        .iter()
        .map(|&m| {
            let (lp, its) = per_method(runs, m);
            format!("{m:?} {lp:.2} ({its} its)")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn time_series() -> Outcome {
    let secs = budget("HMWS_TS_BUDGET_S", 60.0);
    let mut base = RunConfig::new(Domain::Timeseries, Method::Hmws, u64::MAX, "unused");
    (base.memory_size, base.proposals, base.importance_samples) = (2, 8, 3);
    base.data.count = 100;
    base.data.seed = 7;
    base.minibatch = 10;
    base.adam.lr = 1e-2;
    base.eval_interval = u64::MAX;
    base.eval_size = 30;
    base.time_budget_s = Some(secs);
    let runs = run_all(&base, |_, _| {});
    let (h, _) = per_method(&runs, Method::Hmws);
    let (r, _) = per_method(&runs, Method::Rws);
    let (v, _) = per_method(&runs, Method::Vimco);
    let (f, _) = per_method(&runs, Method::Reinforce);
    Outcome {
        pass: h >= r && h - v >= 1.0 && h - f >= 1.0,
        detail: format!(
            "{secs:.0} s per run, 5 seeds, median final IWAE-100 log p: {}; margins over VIMCO {:.2}, REINFORCE {:.2}",
            summary(&runs),
            h - v,
            h - f
        ),
    }
}

pub fn blocks() -> Outcome {
    let secs = budget("HMWS_BLOCKS_BUDGET_S", 60.0);
    let mut base = RunConfig::new(Domain::Blocks2d, Method::Hmws, u64::MAX, "unused");
    (base.memory_size, base.proposals, base.importance_samples) = (5, 5, 5);
    base.blocks = Blocks2DConfig {
        height: 32,
        width: 32,
        ..Blocks2DConfig::default()
    };
    base.data.count = 1000;
    base.data.seed = 7;
    base.minibatch = 10;
    base.adam.lr = 1e-2;
    base.eval_interval = u64::MAX;
    base.eval_size = 30;
    base.time_budget_s = Some(secs);
    let threshold = 2.0 * base.blocks.sigma_pix.powi(2);
    let mut fractions = Vec::new();
    let runs = run_all(&base, |cfg, method| {
        if method != Method::Hmws {
            return;
        }
        let mut s = Session::<BlocksModel>::new(cfg.clone()).unwrap();
        s.load_checkpoint(&latest_checkpoint(&cfg.output).unwrap())
            .unwrap();
        let eval = s.eval_indices();
        let good = eval
            .iter()
            .filter(|&&d| reconstruct_scene(&s, d).unwrap().mse < threshold)
            .count();
        fractions.push(good as f64 / eval.len() as f64);
    });
    let (h, _) = per_method(&runs, Method::Hmws);
    let beats = METHODS[1..].iter().all(|&m| h >= per_method(&runs, m).0);
    let frac = median(&fractions);
    Outcome {
        pass: beats && frac >= 0.8,
        detail: format!(
            "{secs:.0} s per run, 5 seeds, median final IWAE-100 log p: {}; HMWS scenes reconstructed below MSE {threshold:.3}: median {:.0}%",
            summary(&runs),
            100.0 * frac
        ),
    }
}
