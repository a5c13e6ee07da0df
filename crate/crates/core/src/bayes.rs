//! Gaussian model of per-job mean task length.
//!
//! A job's mean task length `x` is drawn from a prior `N(mu, sigma0_sq)`;
//! each task of the job runs for `N(x, sigma1_sq)`. A history-based
//! predictor only knows the prior; a sampling-based predictor additionally
//! observes `m` task lengths and conditions on them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesError {
    #[error("history-based estimate is undefined with an infinite prior variance")]
    InfinitePriorVariance,
    #[error("no prior information and no samples")]
    NoInformation,
    #[error("variance must be positive")]
    NonPositiveVariance,
    #[error("quadrature grid does not cover the posterior: {0}")]
    GridTooNarrow(String),
}

/// Prior over the job-wise mean task length. `sigma0_sq` may be `+inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mu: f64,
    pub sigma0_sq: f64,
}

impl GaussianPrior {
    pub fn new(mu: f64, sigma0_sq: f64) -> Result<Self, BayesError> {
        if !(sigma0_sq > 0.0) {
            return Err(BayesError::NonPositiveVariance);
        }
        Ok(GaussianPrior { mu, sigma0_sq })
    }

    /// The no-prior limit.
    pub fn flat() -> Self {
        GaussianPrior {
            mu: 0.0,
            sigma0_sq: f64::INFINITY,
        }
    }
}

/// Task-wise variance around the job's mean task length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskNoise {
    pub sigma1_sq: f64,
}

impl TaskNoise {
    pub fn new(sigma1_sq: f64) -> Result<Self, BayesError> {
        if !(sigma1_sq > 0.0) || sigma1_sq.is_infinite() {
            return Err(BayesError::NonPositiveVariance);
        }
        Ok(TaskNoise { sigma1_sq })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

/// Best estimate from history alone: the prior itself.
pub fn history_estimate(prior: &GaussianPrior) -> Result<Posterior, BayesError> {
    if prior.sigma0_sq.is_infinite() {
        return Err(BayesError::InfinitePriorVariance);
    }
    Ok(Posterior {
        mean: prior.mu,
        variance: prior.sigma0_sq,
    })
}

/// Posterior of the mean task length after observing `samples`.
pub fn sampling_posterior(
    prior: &GaussianPrior,
    noise: &TaskNoise,
    samples: &[f64],
) -> Result<Posterior, BayesError> {
    let m = samples.len() as f64;
    let sum: f64 = samples.iter().sum();
    if prior.sigma0_sq.is_infinite() {
        if samples.is_empty() {
            return Err(BayesError::NoInformation);
        }
        return Ok(Posterior {
            mean: sum / m,
            variance: noise.sigma1_sq / m,
        });
    }
    let precision = m / noise.sigma1_sq + 1.0 / prior.sigma0_sq;
    Ok(Posterior {
        mean: (sum / noise.sigma1_sq + prior.mu / prior.sigma0_sq) / precision,
        variance: 1.0 / precision,
    })
}

/// Uniform integration grid `[lo, hi]` with spacing `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Grid {
    /// Grid spanning `half_width` standard deviations either side of `center`,
    /// with `points_per_sd` nodes per standard deviation.
    pub fn around(center: f64, sd: f64, half_width: f64, points_per_sd: f64) -> Self {
        Grid {
            lo: center - half_width * sd,
            hi: center + half_width * sd,
            step: sd / points_per_sd,
        }
    }
}

/// Posterior mean and variance by direct trapezoidal integration of
/// `P(y|x) P(x)` over a grid. Serves as an independent check on the closed form.
pub fn posterior_quadrature_oracle(
    prior: &GaussianPrior,
    noise: &TaskNoise,
    samples: &[f64],
    grid: Grid,
) -> Result<Posterior, BayesError> {
    if prior.sigma0_sq.is_infinite() {
        return Err(BayesError::InfinitePriorVariance);
    }
    if !(grid.step > 0.0) || !(grid.hi > grid.lo) {
        return Err(BayesError::GridTooNarrow("empty grid".into()));
    }
    let closed = sampling_posterior(prior, noise, samples)?;
    let sd = closed.variance.sqrt();
    if closed.mean < grid.lo + 4.0 * sd || closed.mean > grid.hi - 4.0 * sd {
        return Err(BayesError::GridTooNarrow(format!(
            "posterior mean {} with sd {} outside [{}, {}]",
            closed.mean, sd, grid.lo, grid.hi
        )));
    }

    let log_density = |x: f64| {
        let prior_term = -(x - prior.mu).powi(2) / (2.0 * prior.sigma0_sq);
        let lik: f64 = samples
            .iter()
            .map(|y| -(y - x).powi(2) / (2.0 * noise.sigma1_sq))
            .sum();
        prior_term + lik
    };

    let n = ((grid.hi - grid.lo) / grid.step).round() as usize;
    let xs: Vec<f64> = (0..=n).map(|i| grid.lo + i as f64 * grid.step).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| log_density(x)).collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let weights: Vec<f64> = logs
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * (l - peak).exp()
        })
        .collect();
    let z: f64 = weights.iter().sum();
    let mean = weights.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / z;
    let variance = weights
        .iter()
        .zip(&xs)
        .map(|(w, x)| w * (x - mean).powi(2))
        .sum::<f64>()
        / z;
    Ok(Posterior { mean, variance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    SamplingBetter,
    HistoryBetter,
    Tie,
}

/// Compares the history error `sigma0_sq` against the sampling error `sigma1_sq / m`.
pub fn regime_advantage(prior: &GaussianPrior, noise: &TaskNoise, m: usize) -> Regime {
    let sampling = noise.sigma1_sq / m.max(1) as f64;
    if prior.sigma0_sq > sampling {
        Regime::SamplingBetter
    } else if prior.sigma0_sq < sampling {
        Regime::HistoryBetter
    } else {
        Regime::Tie
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn prior(mu: f64, s0: f64) -> GaussianPrior {
        GaussianPrior::new(mu, s0).unwrap()
    }

    fn noise(s1: f64) -> TaskNoise {
        TaskNoise::new(s1).unwrap()
    }

    #[test]
    fn history_passthrough() {
        let p = history_estimate(&prior(5.0, 2.0)).unwrap();
        assert_eq!((p.mean, p.variance), (5.0, 2.0));
        let p = history_estimate(&prior(0.0, 1.0)).unwrap();
        assert_eq!((p.mean, p.variance), (0.0, 1.0));
        assert_eq!(
            history_estimate(&prior(1.0, f64::INFINITY)),
            Err(BayesError::InfinitePriorVariance)
        );
    }

    #[test]
    fn flat_prior_gives_sample_mean() {
        let p = sampling_posterior(&GaussianPrior::flat(), &noise(4.0), &[2.0, 4.0, 6.0]).unwrap();
        assert_abs_diff_eq!(p.mean, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.variance, 4.0 / 3.0, epsilon = 1e-12);
        assert_eq!(
            sampling_posterior(&GaussianPrior::flat(), &noise(4.0), &[]),
            Err(BayesError::NoInformation)
        );
    }

    #[test]
    fn one_sample_posterior() {
        // frozen from the quadrature oracle below: (3, 0.5)
        let p = sampling_posterior(&prior(2.0, 1.0), &noise(1.0), &[4.0]).unwrap();
        assert_abs_diff_eq!(p.mean, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.variance, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn no_samples_is_prior() {
        let p = sampling_posterior(&prior(5.0, 2.0), &noise(1.0), &[]).unwrap();
        assert_abs_diff_eq!(p.mean, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.variance, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn oracle_on_reference_grid() {
        let grid = Grid {
            lo: -20.0,
            hi: 20.0,
            step: 1e-4,
        };
        let p = posterior_quadrature_oracle(&prior(2.0, 1.0), &noise(1.0), &[4.0], grid).unwrap();
        assert_abs_diff_eq!(p.mean, 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.variance, 0.5, epsilon = 1e-6);

        let p =
            posterior_quadrature_oracle(&prior(0.0, 1.0), &noise(1.0), &[0.0, 0.0], grid).unwrap();
        assert_abs_diff_eq!(p.mean, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.variance, 1.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn oracle_rejects_narrow_grid() {
        let grid = Grid {
            lo: 0.0,
            hi: 0.1,
            step: 1e-4,
        };
        assert!(matches!(
            posterior_quadrature_oracle(&prior(2.0, 1.0), &noise(1.0), &[4.0], grid),
            Err(BayesError::GridTooNarrow(_))
        ));
    }

    #[test]
    fn regimes() {
        assert_eq!(
            regime_advantage(&prior(0.0, 1.0), &noise(1.0), 10),
            Regime::SamplingBetter
        );
        assert_eq!(
            regime_advantage(&prior(0.0, 0.01), &noise(1.0), 1),
            Regime::HistoryBetter
        );
        assert_eq!(
            regime_advantage(&prior(0.0, 0.5), &noise(1.0), 2),
            Regime::Tie
        );
    }

    #[test]
    fn variance_shrinks_with_samples() {
        let pr = prior(1.0, 3.0);
        let nz = noise(2.0);
        let mut last = f64::INFINITY;
        for m in 0..30 {
            let v = sampling_posterior(&pr, &nz, &vec![1.5; m])
                .unwrap()
                .variance;
            assert!(v <= last);
            last = v;
        }
    }
}
