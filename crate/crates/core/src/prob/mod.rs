//! Distributions, importance sampling and the conjugate Gaussian testbed.

mod dist;
mod is;
pub mod rng;
pub mod testbed;

pub use dist::{
    categorical_log_prob, gaussian_log_prob, normal_log_pdf, sample_log_probs, Categorical,
    DiagonalGaussian, WeightedSample, LN_2PI,
};
pub use is::{effective_sample_size, is_expectation, is_normalizer, normalized_weights};
pub use rng::{stream, tagged_stream, StreamRng};
pub use testbed::{ConjugateTestbed, TestbedExact, TestbedModel};
