//! Job runtime predictors.
//!
//! Sampling-based prediction runs a few pilot tasks of a job and extrapolates
//! from their empirical mean. History-based prediction looks up completed
//! jobs that share a feature value with the new job. The oracle predictor
//! reads the true durations and bounds what any predictor can achieve.

mod history;
mod sampler;

pub use history::{
    feature_predictions, point_estimate_predict, predict_with_fallback, record_completion,
    three_sigma_predict, Feature, FeaturePredictions, HistoryEstimator, HistoryRecord,
    HistoryStore, DEFAULT_ERROR_DECAY,
};
pub use sampler::{SamplerPhase, SamplerState, RATIO_GRID};

use rand::Rng;
use thiserror::Error;

use crate::domain::{Job, Prediction, PredictionSource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("pilot count {count} invalid for width {width}")]
    InvalidPilotCount { count: usize, width: usize },
    #[error("no sampled task durations")]
    NoSamples,
    #[error("runtime distribution is empty")]
    EmptyDistribution,
    #[error("runtime distribution is invalid: {0}")]
    InvalidDistribution(String),
    #[error("no history record matches any feature of the job")]
    NoHistory,
    #[error("history record completed at {got} before the latest record at {last}")]
    NonMonotoneHistory { got: u64, last: u64 },
    #[error("history estimate of the sampled stage is zero")]
    DegenerateHistory,
    #[error("DAG has no stages")]
    EmptyDag,
    #[error("invalid history record: {0}")]
    InvalidRecord(String),
}

/// Number of pilot tasks for a job of `width` tasks at sampling `ratio`.
pub fn pilot_count(width: usize, ratio: f64) -> usize {
    let nominal = (ratio * width as f64).ceil() as usize;
    nominal.clamp(1, width.max(1))
}

/// Uniformly random pilot subset of `0..width`, returned in ascending order.
pub fn select_pilots<R: Rng + ?Sized>(
    width: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>, PredictError> {
    if count == 0 || count > width {
        return Err(PredictError::InvalidPilotCount { count, width });
    }
    let mut picked = rand::seq::index::sample(rng, width, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Estimate from observed pilot durations: empirical mean scaled by width,
/// plus the largest observed task as the max-task-length estimate.
pub fn slearn_estimate(
    sampled_durations_ms: &[f64],
    width: usize,
) -> Result<Prediction, PredictError> {
    if sampled_durations_ms.is_empty() {
        return Err(PredictError::NoSamples);
    }
    let mean = sampled_durations_ms.iter().sum::<f64>() / sampled_durations_ms.len() as f64;
    let max = sampled_durations_ms
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Prediction::from_mean(
        mean,
        width,
        Some(max),
        PredictionSource::Sampling,
    ))
}

/// Point estimate `c` minimizing `sum p_i (c - a_i)^2 / a_i^2`.
///
/// The closed form is `(sum p_i / a_i) / (sum p_i / a_i^2)`.
pub fn utility_point_estimate(histogram: &[(f64, f64)]) -> Result<f64, PredictError> {
    if histogram.is_empty() {
        return Err(PredictError::EmptyDistribution);
    }
    if histogram.iter().any(|&(a, p)| !(a > 0.0) || !(p >= 0.0)) {
        return Err(PredictError::InvalidDistribution(
            "values must be positive and probabilities nonnegative".into(),
        ));
    }
    let mass: f64 = histogram.iter().map(|&(_, p)| p).sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(PredictError::InvalidDistribution(format!(
            "probabilities sum to {mass}"
        )));
    }
    let (num, den) = histogram
        .iter()
        .fold((0.0, 0.0), |(n, d), &(a, p)| (n + p / a, d + p / (a * a)));
    Ok(num / den)
}

/// Median; an even-length list yields the midpoint of the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

pub fn oracle_predict(job: &Job) -> Prediction {
    Prediction {
        mean_task_ms: job.mean_task_ms(),
        total_ms: job.total_runtime_ms() as f64,
        max_task_ms: Some(job.max_task_ms() as f64),
        source: PredictionSource::Oracle,
    }
}

/// Hybrid DAG estimate: the sampled first stage `d_s` plus the history
/// estimates of the remaining stages corrected by the ratio `d_s / d_h`.
pub fn slearn_dag_estimate(
    d_s: f64,
    d_h: f64,
    remaining_history_estimates: &[f64],
) -> Result<f64, PredictError> {
    if !(d_h > 0.0) {
        return Err(PredictError::DegenerateHistory);
    }
    let ratio = d_s / d_h;
    Ok(d_s + ratio * remaining_history_estimates.iter().sum::<f64>())
}

pub fn three_sigma_dag_estimate(stage_estimates: &[f64]) -> Result<f64, PredictError> {
    if stage_estimates.is_empty() {
        return Err(PredictError::EmptyDag);
    }
    Ok(stage_estimates.iter().sum())
}
