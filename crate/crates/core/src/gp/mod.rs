//! Gaussian-process time series with compositional kernel structure.
//!
//! The discrete latent is a kernel expression over the grammar
//! `k → k + k | k × k | C | WN | SE | LIN | PER_1 … PER_10`, the continuous
//! latent holds each terminal's raw parameters, and the observation is a
//! standardized series on the grid `0, 1/127, …, 1`.

mod data;
mod grammar;
mod kernel;
mod likelihood;
mod model;

pub use data::{
    center_crop, ingest_timeseries, resample, sample_path, standardize, synth_timeseries,
    IngestReport, TimeseriesDataset, MAX_PER_CLASS, SERIES_LEN, SYNTH_KERNELS,
};
pub use grammar::{
    operator_allowed, validate_expr, KernelExpr, Token, Validation, MAX_PARAMS, NUM_PERIOD_BUCKETS,
    NUM_TOKENS,
};
pub use kernel::{
    constrained, eval_kernel, kernel_matrix, softplus_inv, split_params, KernelMatrix,
};
pub use likelihood::{
    gp_log_marginal, gp_log_marginal_grad, gp_log_marginal_on_tape, gp_predict, jittered_cholesky,
    GpGradient, Prediction, JITTER,
};
pub use model::{bucket_period, GpConfig, GpModel};
