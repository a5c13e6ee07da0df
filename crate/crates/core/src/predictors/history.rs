//! History store and history-based predictors.
//!
//! Completed jobs are indexed by each of six features. A new job is predicted
//! from the records that share the feature with the lowest rolling error,
//! restricted to a sliding window of recent completions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{median, utility_point_estimate, PredictError};
use crate::domain::{Job, JobFeatures, Prediction, PredictionSource, MS_PER_DAY};

/// Decay of the exponentially weighted per-feature error.
pub const DEFAULT_ERROR_DECAY: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    Application,
    JobName,
    User,
    SubmitDay,
    SubmitHour,
    /// cpu and memory request combined into one value
    Resources,
}

impl Feature {
    pub const ALL: [Feature; 6] = [
        Feature::Application,
        Feature::JobName,
        Feature::User,
        Feature::SubmitDay,
        Feature::SubmitHour,
        Feature::Resources,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Application => "application",
            Feature::JobName => "job_name",
            Feature::User => "user",
            Feature::SubmitDay => "submit_day",
            Feature::SubmitHour => "submit_hour",
            Feature::Resources => "resources",
        }
    }

    pub fn key(self, f: &JobFeatures) -> String {
        match self {
            Feature::Application => f.application.clone(),
            Feature::JobName => f.job_name.clone(),
            Feature::User => f.user.clone(),
            Feature::SubmitDay => f.submit_day.to_string(),
            Feature::SubmitHour => f.submit_hour.to_string(),
            Feature::Resources => format!("{}:{}", f.cpu_req, f.mem_req),
        }
    }
}

/// What each feature alone would have predicted for a job (mean task ms).
pub type FeaturePredictions = [Option<f64>; 6];

/// Statistics of one completed job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub completion_time_ms: u64,
    pub avg_task_runtime_ms: f64,
    pub max_task_runtime_ms: f64,
    pub total_runtime_ms: f64,
    pub features: JobFeatures,
}

impl HistoryRecord {
    /// Record for `job` completing at `completion_time_ms`.
    pub fn from_job(job: &Job, completion_time_ms: u64) -> Self {
        HistoryRecord {
            completion_time_ms,
            avg_task_runtime_ms: job.mean_task_ms(),
            max_task_runtime_ms: job.max_task_ms() as f64,
            total_runtime_ms: job.total_runtime_ms() as f64,
            features: job.features().clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HistoryStore {
    records: Vec<HistoryRecord>,
    index: [HashMap<String, Vec<usize>>; 6],
    rolling_error: [f64; 6],
    decay: f64,
}

impl Default for HistoryStore {
    fn default() -> Self {
        Self::with_decay(DEFAULT_ERROR_DECAY)
    }
}

impl HistoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_decay(decay: f64) -> Self {
        HistoryStore {
            records: Vec::new(),
            index: Default::default(),
            rolling_error: [0.0; 6],
            decay,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn rolling_error(&self, feature: Feature) -> f64 {
        self.rolling_error[feature.index()]
    }

    /// Overrides a rolling error; used to seed stores in tests and analyses.
    pub fn set_rolling_error(&mut self, feature: Feature, err: f64) {
        self.rolling_error[feature.index()] = err.max(0.0);
    }

    /// Number of records filed under `value` for `feature`.
    pub fn index_len(&self, feature: Feature, value: &str) -> usize {
        self.index[feature.index()].get(value).map_or(0, Vec::len)
    }

    /// Records sharing `feature` with `features` that completed in `[from, to)`.
    pub fn matching<'a>(
        &'a self,
        feature: Feature,
        features: &JobFeatures,
        from_ms: u64,
        to_ms: u64,
    ) -> impl Iterator<Item = &'a HistoryRecord> + 'a {
        let list: &[usize] = self.index[feature.index()]
            .get(&feature.key(features))
            .map_or(&[], Vec::as_slice);
        let completion = |i: &usize| self.records[*i].completion_time_ms;
        let lo = list.partition_point(|i| completion(i) < from_ms);
        let hi = list.partition_point(|i| completion(i) < to_ms);
        list[lo..hi.max(lo)].iter().map(move |&i| &self.records[i])
    }

    fn last_completion(&self) -> Option<u64> {
        self.records.last().map(|r| r.completion_time_ms)
    }
}

/// Appends a completed job and updates every feature's rolling error with
/// that feature's own earlier prediction for the job.
pub fn record_completion(
    store: &mut HistoryStore,
    record: HistoryRecord,
    predicted_by_feature: &FeaturePredictions,
) -> Result<(), PredictError> {
    if let Some(last) = store.last_completion() {
        if record.completion_time_ms < last {
            return Err(PredictError::NonMonotoneHistory {
                got: record.completion_time_ms,
                last,
            });
        }
    }
    if !(record.avg_task_runtime_ms > 0.0)
        || record.max_task_runtime_ms < record.avg_task_runtime_ms
    {
        return Err(PredictError::InvalidRecord(
            "expected max >= avg > 0".into(),
        ));
    }
    let actual = record.avg_task_runtime_ms;
    for feature in Feature::ALL {
        if let Some(pred) = predicted_by_feature[feature.index()] {
            let e = &mut store.rolling_error[feature.index()];
            *e = (1.0 - store.decay) * *e + store.decay * (pred - actual).abs() / actual;
        }
    }
    let slot = store.records.len();
    for feature in Feature::ALL {
        store.index[feature.index()]
            .entry(feature.key(&record.features))
            .or_default()
            .push(slot);
    }
    store.records.push(record);
    Ok(())
}

/// How a history-based predictor turns matching records into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistoryEstimator {
    /// Utility-weighted point of the empirical distribution.
    Utility,
    /// Median of the matching records.
    Median,
}

impl HistoryEstimator {
    fn source(self) -> PredictionSource {
        match self {
            HistoryEstimator::Utility => PredictionSource::History,
            HistoryEstimator::Median => PredictionSource::PointEstimate,
        }
    }

    fn estimate(self, avgs: &[f64]) -> Result<f64, PredictError> {
        match self {
            HistoryEstimator::Utility => {
                let p = 1.0 / avgs.len() as f64;
                let hist: Vec<(f64, f64)> = avgs.iter().map(|&a| (a, p)).collect();
                utility_point_estimate(&hist)
            }
            HistoryEstimator::Median => median(avgs).ok_or(PredictError::EmptyDistribution),
        }
    }
}

fn window_start(now_ms: u64, window_days: u64) -> u64 {
    now_ms.saturating_sub(window_days.saturating_mul(MS_PER_DAY))
}

/// Predicted mean task length per feature, from records in the window.
pub fn feature_predictions(
    store: &HistoryStore,
    features: &JobFeatures,
    now_ms: u64,
    window_days: u64,
    estimator: HistoryEstimator,
) -> FeaturePredictions {
    let from = window_start(now_ms, window_days);
    let mut out = [None; 6];
    for feature in Feature::ALL {
        let avgs: Vec<f64> = store
            .matching(feature, features, from, now_ms)
            .map(|r| r.avg_task_runtime_ms)
            .collect();
        if !avgs.is_empty() {
            out[feature.index()] = estimator.estimate(&avgs).ok();
        }
    }
    out
}

fn history_predict(
    store: &HistoryStore,
    job: &Job,
    now_ms: u64,
    window_days: u64,
    estimator: HistoryEstimator,
) -> Result<Prediction, PredictError> {
    let from = window_start(now_ms, window_days);
    let best = Feature::ALL
        .iter()
        .copied()
        .filter(|&f| {
            store
                .matching(f, job.features(), from, now_ms)
                .next()
                .is_some()
        })
        .min_by(|a, b| store.rolling_error(*a).total_cmp(&store.rolling_error(*b)))
        .ok_or(PredictError::NoHistory)?;
    let matched: Vec<&HistoryRecord> = store.matching(best, job.features(), from, now_ms).collect();
    let avgs: Vec<f64> = matched.iter().map(|r| r.avg_task_runtime_ms).collect();
    let mean = estimator.estimate(&avgs)?;
    let max = matched
        .iter()
        .map(|r| r.max_task_runtime_ms)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Prediction::from_mean(
        mean,
        job.task_count(),
        Some(max),
        estimator.source(),
    ))
}

/// Prediction from the best feature's history using the utility estimator.
pub fn three_sigma_predict(
    store: &HistoryStore,
    job: &Job,
    now_ms: u64,
    window_days: u64,
) -> Result<Prediction, PredictError> {
    history_predict(store, job, now_ms, window_days, HistoryEstimator::Utility)
}

/// As [`three_sigma_predict`] but with the median as the point estimate.
pub fn point_estimate_predict(
    store: &HistoryStore,
    job: &Job,
    now_ms: u64,
    window_days: u64,
) -> Result<Prediction, PredictError> {
    history_predict(store, job, now_ms, window_days, HistoryEstimator::Median)
}

/// History prediction that never fails: without matching records it uses the
/// median of every completed job's mean task length, and with an empty store
/// it predicts a mean task length of `cold_start_mean_ms`.
pub fn predict_with_fallback(
    store: &HistoryStore,
    job: &Job,
    now_ms: u64,
    window_days: u64,
    estimator: HistoryEstimator,
    cold_start_mean_ms: f64,
) -> Prediction {
    match history_predict(store, job, now_ms, window_days, estimator) {
        Ok(p) => p,
        Err(_) => {
            let avgs: Vec<f64> = store
                .records()
                .iter()
                .map(|r| r.avg_task_runtime_ms)
                .collect();
            let mean = median(&avgs).unwrap_or(cold_start_mean_ms);
            Prediction::from_mean(mean, job.task_count(), None, estimator.source())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(app: &str, user: &str) -> JobFeatures {
        JobFeatures {
            application: app.into(),
            job_name: format!("{app}-job"),
            user: user.into(),
            submit_day: 1,
            submit_hour: 2,
            cpu_req: 1.0,
            mem_req: 2.0,
        }
    }

    fn rec(t: u64, avg: f64, f: JobFeatures) -> HistoryRecord {
        HistoryRecord {
            completion_time_ms: t,
            avg_task_runtime_ms: avg,
            max_task_runtime_ms: avg * 2.0,
            total_runtime_ms: avg * 10.0,
            features: f,
        }
    }

    fn job(f: JobFeatures, width: usize) -> Job {
        Job::new("new", 1000, vec![1; width], f).unwrap()
    }

    #[test]
    fn insert_into_empty_store() {
        let mut s = HistoryStore::new();
        let f = feats("a", "u");
        record_completion(&mut s, rec(1, 10.0, f.clone()), &[None; 6]).unwrap();
        for feature in Feature::ALL {
            assert_eq!(s.index_len(feature, &feature.key(&f)), 1);
        }
    }

    #[test]
    fn rolling_error_update() {
        let mut s = HistoryStore::with_decay(0.1);
        let mut preds = [None; 6];
        preds[Feature::User.index()] = Some(120.0);
        record_completion(&mut s, rec(1, 100.0, feats("a", "u")), &preds).unwrap();
        assert!((s.rolling_error(Feature::User) - 0.02).abs() < 1e-15);
        assert_eq!(s.rolling_error(Feature::Application), 0.0);
    }

    #[test]
    fn rejects_out_of_order() {
        let mut s = HistoryStore::new();
        record_completion(&mut s, rec(10, 1.0, feats("a", "u")), &[None; 6]).unwrap();
        assert_eq!(
            record_completion(&mut s, rec(5, 1.0, feats("a", "u")), &[None; 6]),
            Err(PredictError::NonMonotoneHistory { got: 5, last: 10 })
        );
    }

    #[test]
    fn degenerate_histogram_single_feature() {
        let mut s = HistoryStore::new();
        // only the user feature will match the new job
        for t in 0..3 {
            let f = JobFeatures {
                user: "bob".into(),
                submit_day: 5,
                submit_hour: 9,
                cpu_req: 8.0,
                ..feats("other", "bob")
            };
            record_completion(&mut s, rec(t, 1e4, f), &[None; 6]).unwrap();
        }
        let j = job(feats("mine", "bob"), 7);
        let p = three_sigma_predict(&s, &j, 1000, 14).unwrap();
        assert!((p.mean_task_ms - 1e4).abs() < 1e-9);
        assert!((p.total_ms - 7e4).abs() < 1e-6);
        assert_eq!(p.max_task_ms, Some(2e4));
        assert_eq!(p.source, PredictionSource::History);
    }

    #[test]
    fn lowest_error_feature_wins() {
        let mut s = HistoryStore::new();
        let app_only = JobFeatures {
            user: "x".into(),
            job_name: "x".into(),
            submit_day: 6,
            submit_hour: 23,
            cpu_req: 9.0,
            ..feats("app", "x")
        };
        let user_only = JobFeatures {
            application: "y".into(),
            job_name: "y".into(),
            submit_day: 6,
            submit_hour: 23,
            cpu_req: 9.0,
            ..feats("y", "usr")
        };
        record_completion(&mut s, rec(1, 100.0, app_only), &[None; 6]).unwrap();
        record_completion(&mut s, rec(2, 900.0, user_only), &[None; 6]).unwrap();
        s.set_rolling_error(Feature::Application, 0.2);
        s.set_rolling_error(Feature::User, 0.5);
        let j = job(feats("app", "usr"), 1);
        let p = three_sigma_predict(&s, &j, 10, 14).unwrap();
        assert_eq!(p.mean_task_ms, 100.0);
        s.set_rolling_error(Feature::Application, 0.9);
        let p = three_sigma_predict(&s, &j, 10, 14).unwrap();
        assert_eq!(p.mean_task_ms, 900.0);
    }

    #[test]
    fn empty_store_has_no_history() {
        let s = HistoryStore::new();
        let j = job(feats("a", "u"), 3);
        assert_eq!(
            three_sigma_predict(&s, &j, 5, 3),
            Err(PredictError::NoHistory)
        );
        assert_eq!(
            point_estimate_predict(&s, &j, 5, 3),
            Err(PredictError::NoHistory)
        );
        let p = predict_with_fallback(&s, &j, 5, 3, HistoryEstimator::Utility, 1e6);
        assert_eq!(p.mean_task_ms, 1e6);
    }

    #[test]
    fn median_point_estimate() {
        let mut s = HistoryStore::new();
        for (t, a) in [(1, 5.0), (2, 100.0), (3, 10.0)] {
            record_completion(&mut s, rec(t, a, feats("a", "u")), &[None; 6]).unwrap();
        }
        let j = job(feats("a", "u"), 2);
        let p = point_estimate_predict(&s, &j, 10, 14).unwrap();
        assert_eq!(p.mean_task_ms, 10.0);
        assert_eq!(p.source, PredictionSource::PointEstimate);

        let mut s = HistoryStore::new();
        for (t, a) in [(1, 4.0), (2, 8.0)] {
            record_completion(&mut s, rec(t, a, feats("a", "u")), &[None; 6]).unwrap();
        }
        assert_eq!(
            point_estimate_predict(&s, &j, 10, 14).unwrap().mean_task_ms,
            6.0
        );
    }

    #[test]
    fn window_excludes_stale_and_future_records() {
        let mut s = HistoryStore::new();
        let f = feats("a", "u");
        record_completion(&mut s, rec(0, 50.0, f.clone()), &[None; 6]).unwrap();
        record_completion(&mut s, rec(4 * MS_PER_DAY, 70.0, f.clone()), &[None; 6]).unwrap();
        let now = 5 * MS_PER_DAY;
        let in_window: Vec<f64> = s
            .matching(Feature::User, &f, now - 3 * MS_PER_DAY, now)
            .map(|r| r.avg_task_runtime_ms)
            .collect();
        assert_eq!(in_window, vec![70.0]);
        // a record completing exactly at `now` is not yet visible
        assert_eq!(s.matching(Feature::User, &f, 0, 4 * MS_PER_DAY).count(), 1);
    }
}
