use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

/// Adam hyperparameters. Defaults are the usual `1e-3, 0.9, 0.999, 1e-8`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every slot of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
}

/// Outcome of one [`adam_step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamReport {
    /// Slots left untouched because their gradient was not finite.
    pub skipped: Vec<String>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            (0..store.len())
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, id: usize) -> &Tensor {
        &self.m[id]
    }

    pub fn second_moment(&self, id: usize) -> &Tensor {
        &self.v[id]
    }

    pub(crate) fn from_parts(
        config: AdamConfig,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Self {
        AdamState { config, step, m, v }
    }
}

/// One bias-corrected Adam descent step on every slot with a gradient.
///
/// Slots without a gradient are not touched; slots with a non-finite gradient
/// are skipped and reported.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> AdamReport {
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut report = AdamReport::default();

    for (id, g) in grads.iter() {
        if !g.is_finite() {
            report.skipped.push(store.name(id).to_string());
            continue;
        }
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let p = store.value_mut(id).data_mut();
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + epsilon);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{Role, Tape};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Role::Generative, Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut g = Gradients::zeros(&s);
        g.accumulate(0, 1.0, &Tensor::scalar(0.0));
        for _ in 0..10 {
            adam_step(&mut s, &g, &mut st);
        }
        assert_eq!(s.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut g = Gradients::zeros(&s);
        g.accumulate(0, 1.0, &Tensor::scalar(1.0));
        adam_step(&mut s, &g, &mut st);
        assert!((s.get("p").unwrap().item() + 1e-3).abs() < 1e-10);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        for _ in 0..200 {
            let mut tape = Tape::new(&s);
            let p = tape.param(&s, "p").unwrap();
            let two = tape.scalar(2.0);
            let d = tape.sub(p, two).unwrap();
            let f = tape.square(d).unwrap();
            let g = tape.grad(&s, f).unwrap();
            adam_step(&mut s, &g, &mut st);
        }
        assert!((s.get("p").unwrap().item() - 2.0).abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_skips_slot() {
        let mut s = scalar_store(1.0);
        s.insert("q", Role::Recognition, Tensor::scalar(1.0))
            .unwrap();
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut g = Gradients::zeros(&s);
        g.accumulate(0, 1.0, &Tensor::scalar(f64::NAN));
        g.accumulate(1, 1.0, &Tensor::scalar(1.0));
        let r = adam_step(&mut s, &g, &mut st);
        assert_eq!(r.skipped, vec!["p".to_string()]);
        assert_eq!(s.get("p").unwrap().item(), 1.0);
        assert!(s.get("q").unwrap().item() < 1.0);
    }
}
