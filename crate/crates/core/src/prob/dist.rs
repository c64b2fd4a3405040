use rand::Rng;
use rand_distr::StandardNormal;

use crate::ad::{log_sum_exp, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log density of `Normal(mean, std²)` at `x`.
pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * LN_2PI
}

/// Categorical over `0..logits.len()`. Entries of `-inf` have zero mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    logits: Tensor,
    log_norm: f64,
}

impl Categorical {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptySamples);
        }
        let log_norm = log_sum_exp(logits.data());
        if !log_norm.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        Ok(Categorical { logits, log_norm })
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        Categorical::new(Tensor::vector(logits))
    }

    pub fn uniform(n: usize) -> Self {
        Categorical::from_logits(vec![0.0; n]).expect("n > 0")
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.logits
            .data()
            .iter()
            .map(|l| l - self.log_norm)
            .collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits
            .data()
            .iter()
            .map(|l| (l - self.log_norm).exp())
            .collect()
    }

    pub fn log_prob(&self, value: usize) -> Result<f64> {
        match self.logits.data().get(value) {
            Some(&l) if l > f64::NEG_INFINITY => Ok(l - self.log_norm),
            _ => Err(Error::OutOfSupport {
                dist: "Categorical",
                value: value.to_string(),
            }),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_log_probs(&self.log_probs(), rng)
    }
}

/// Inverse-CDF draw from normalized log-probabilities.
pub fn sample_log_probs<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        if *lp == f64::NEG_INFINITY {
            continue;
        }
        last = i;
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    last
}

/// Factorized Gaussian parameterized by mean and log standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::LengthMismatch(mean.len(), log_std.len()));
        }
        Ok(DiagonalGaussian { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::OutOfSupport {
                dist: "DiagonalGaussian",
                value: format!("vector of length {} (expected {})", x.len(), self.dim()),
            });
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::OutOfSupport {
                dist: "DiagonalGaussian",
                value: v.to_string(),
            });
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_std)
            .map(|((&xi, &m), &ls)| normal_log_pdf(xi, m, ls.exp()))
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let e: f64 = rng.sample(StandardNormal);
                m + ls.exp() * e
            })
            .collect()
    }
}

/// `Σ_i log N(x_i; mean_i, exp(log_std_i)²)` recorded on a tape.
pub fn gaussian_log_prob(tape: &mut Tape, x: Var, mean: Var, log_std: Var) -> Result<Var> {
    if tape.value(x).is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let diff = tape.sub(x, mean)?;
    let neg_ls = tape.neg(log_std)?;
    let inv_std = tape.exp(neg_ls)?;
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z)?;
    let half = tape.scale(z2, -0.5)?;
    let t = tape.sub(half, log_std)?;
    let s = tape.sum(t)?;
    let n = tape.value(x).len() as f64;
    let c = tape.scalar(-0.5 * LN_2PI * n);
    tape.add(s, c)
}

/// Log-probability of `index` under `logits` (masked entries may be `-inf`).
pub fn categorical_log_prob(tape: &mut Tape, logits: Var, index: usize) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let v = tape.pick(lp, index)?;
    if tape.item(v) == f64::NEG_INFINITY {
        return Err(Error::OutOfSupport {
            dist: "Categorical",
            value: index.to_string(),
        });
    }
    Ok(v)
}

/// A sample together with its importance log-weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample<T> {
    pub value: T,
    pub log_weight: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::ParamStore;
    use crate::prob::rng::stream;

    #[test]
    fn uniform_categorical_mass() {
        let c = Categorical::uniform(4);
        assert!((c.log_prob(2).unwrap() - (-1.386294)).abs() < 1e-6);
        assert!(c.log_prob(4).is_err());
        let total: f64 = c.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_log_density_values() {
        assert!((normal_log_pdf(0.0, 0.0, 1.0) + 0.918939).abs() < 1e-6);
        assert!((normal_log_pdf(1.0, 1.0, 2.0) + 1.612086).abs() < 1e-6);
    }

    #[test]
    fn saturated_categorical_is_deterministic() {
        let c = Categorical::from_logits(vec![0.0, 30.0, 0.0, 0.0]).unwrap();
        let mut rng = stream(1, 0, 0);
        for _ in 0..1000 {
            assert_eq!(c.sample(&mut rng), 1);
        }
    }

    #[test]
    fn masked_logit_has_no_support() {
        let c = Categorical::from_logits(vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert!(c.log_prob(1).is_err());
        let mut rng = stream(2, 0, 0);
        assert!((0..100).all(|_| c.sample(&mut rng) == 0));
    }

    #[test]
    fn gaussian_tape_matches_scalar() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::vector(vec![0.3, -1.0]));
        let m = t.constant(Tensor::vector(vec![0.0, 1.0]));
        let ls = t.constant(Tensor::vector(vec![0.0, 2f64.ln()]));
        let lp = gaussian_log_prob(&mut t, x, m, ls).unwrap();
        let d = DiagonalGaussian::new(vec![0.0, 1.0], vec![0.0, 2f64.ln()]).unwrap();
        assert!((t.item(lp) - d.log_prob(&[0.3, -1.0]).unwrap()).abs() < 1e-14);
    }
}
