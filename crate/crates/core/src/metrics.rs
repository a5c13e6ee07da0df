//! Measurements over finished simulations and traces, plus CSV emission.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{Job, JobRecord, SchedulerConfig, SimResult, MS_PER_DAY};
use crate::predictors::{Feature, HistoryStore};
use crate::scheduler::queue_index_for;
use crate::stats;

/// Upper cap on signed percentage errors.
pub const ERROR_CAP_PCT: f64 = 1000.0;
pub const SMALL_JOB_MS: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("actual runtime must be positive")]
    InvalidActual,
    #[error("job sets differ: {0}")]
    JobSetMismatch(String),
    #[error("no feature has at least two matching jobs")]
    InsufficientHistory,
    #[error("undefined for fewer than two tasks")]
    Undefined,
    #[error("sampling ratio must lie in (0, 1]")]
    InvalidRatio,
    #[error("unknown job {0}")]
    UnknownJob(String),
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub job_id: String,
    pub signed_pct: f64,
    pub abs_pct: f64,
}

/// Signed (capped) and absolute percentage error of an estimate.
pub fn prediction_error(
    job_id: impl Into<String>,
    est_total: f64,
    actual_total: f64,
) -> Result<ErrorRecord, MetricsError> {
    if !(actual_total > 0.0) {
        return Err(MetricsError::InvalidActual);
    }
    let pct = (est_total - actual_total) / actual_total * 100.0;
    Ok(ErrorRecord {
        job_id: job_id.into(),
        signed_pct: pct.min(ERROR_CAP_PCT),
        abs_pct: pct.abs(),
    })
}

/// Errors for every job in `result` that carries an estimate.
pub fn prediction_errors(result: &SimResult) -> Vec<ErrorRecord> {
    result
        .jobs
        .iter()
        .filter_map(|j| {
            let est = j.estimate.as_ref()?;
            prediction_error(j.job_id.clone(), est.total_ms, j.actual_total_ms() as f64).ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub job_id: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speedup {
    /// Per-job `JCT_baseline / JCT_target`, in target job order.
    pub per_job: Vec<SpeedupRow>,
    /// `meanJCT_baseline / meanJCT_target`
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

pub fn jct_speedup(baseline: &SimResult, target: &SimResult) -> Result<Speedup, MetricsError> {
    let base: BTreeMap<&str, u64> = baseline
        .jobs
        .iter()
        .map(|j| (j.job_id.as_str(), j.jct_ms))
        .collect();
    let ids: BTreeSet<&str> = target.jobs.iter().map(|j| j.job_id.as_str()).collect();
    if base.len() != ids.len() || base.keys().any(|k| !ids.contains(k)) {
        let missing = base
            .keys()
            .find(|k| !ids.contains(*k))
            .or_else(|| ids.iter().find(|k| !base.contains_key(*k)))
            .map_or_else(|| "duplicate ids".to_string(), |k| k.to_string());
        return Err(MetricsError::JobSetMismatch(missing));
    }
    let per_job: Vec<SpeedupRow> = target
        .jobs
        .iter()
        .map(|j| SpeedupRow {
            job_id: j.job_id.clone(),
            ratio: ratio(base[j.job_id.as_str()] as f64, j.jct_ms as f64),
        })
        .collect();
    let ratios: Vec<f64> = per_job.iter().map(|r| r.ratio).collect();
    Ok(Speedup {
        mean: ratio(baseline.mean_jct_ms(), target.mean_jct_ms()),
        p50: stats::percentile(&ratios, 0.5).unwrap_or(1.0),
        p90: stats::percentile(&ratios, 0.9).unwrap_or(1.0),
        per_job,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == den {
        1.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovTime {
    pub per_feature: Vec<(Feature, f64)>,
    pub min: f64,
    pub argmin: Feature,
}

/// Variability of average task runtime among jobs similar to `target`
/// that completed in the `window_days` before `now_ms`.
pub fn cov_time(
    history: &HistoryStore,
    target: &Job,
    now_ms: u64,
    window_days: u64,
) -> Result<CovTime, MetricsError> {
    let from = now_ms.saturating_sub(window_days * MS_PER_DAY);
    let per_feature: Vec<(Feature, f64)> = Feature::ALL
        .iter()
        .filter_map(|&f| {
            let avgs: Vec<f64> = history
                .matching(f, target.features(), from, now_ms)
                .map(|r| r.avg_task_runtime_ms)
                .collect();
            if avgs.len() < 2 {
                return None;
            }
            stats::cov(&avgs).map(|c| (f, c))
        })
        .collect();
    let &(argmin, min) = per_feature
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(MetricsError::InsufficientHistory)?;
    Ok(CovTime {
        per_feature,
        min,
        argmin,
    })
}

/// Task-level variability scaled by the number of sampled tasks:
/// `sigma / (sqrt(ratio * n) * mu)`.
pub fn cov_space(task_durations_ms: &[u64], sampling_ratio: f64) -> Result<f64, MetricsError> {
    if task_durations_ms.len() < 2 {
        return Err(MetricsError::Undefined);
    }
    if !(sampling_ratio > 0.0 && sampling_ratio <= 1.0) {
        return Err(MetricsError::InvalidRatio);
    }
    let v: Vec<f64> = task_durations_ms.iter().map(|&d| d as f64).collect();
    let mean = stats::mean(&v).unwrap();
    let sd = stats::population_std(&v).unwrap();
    Ok(sd / ((sampling_ratio * v.len() as f64).sqrt() * mean))
}

/// Mean task start delay divided by the job's mean task length.
pub fn normalized_waiting_time(job: &JobRecord) -> f64 {
    let waits: f64 = job
        .task_starts_ms
        .iter()
        .map(|&s| (s - job.arrival_ms) as f64)
        .sum();
    waits / job.task_starts_ms.len() as f64 / job.actual_mean_task_ms()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResistanceAt {
    Arrival,
    /// When the job's estimate became available; arrival if it never sampled.
    EstimateReady,
}

/// `(running remainders + queued-ahead work) / machines`.
pub fn resistance_from_parts(
    running_remaining_ms: &[u64],
    queued_ahead_ms: u64,
    machines: usize,
) -> f64 {
    let running: u64 = running_remaining_ms.iter().sum();
    (running + queued_ahead_ms) as f64 / machines as f64
}

/// Work standing in front of `job_id` at the chosen instant: remaining time
/// of every running task plus unstarted tasks of jobs in a higher-priority
/// queue or ahead of it in its own queue, per machine.
pub fn resistance(result: &SimResult, job_id: &str, at: ResistanceAt) -> Result<f64, MetricsError> {
    let me = result
        .job(job_id)
        .ok_or_else(|| MetricsError::UnknownJob(job_id.to_string()))?;
    let t = match at {
        ResistanceAt::Arrival => me.arrival_ms,
        ResistanceAt::EstimateReady => me.estimate_ready_ms.unwrap_or(me.arrival_ms),
    };
    let queue = |j: &JobRecord| j.queue_at(t).unwrap_or(j.queue_assigned);
    let my_key = (queue(me), me.arrival_ms, me.job_id.as_str());
    let mut running = Vec::new();
    let mut ahead = 0u64;
    for other in result.jobs.iter().filter(|j| j.job_id != me.job_id) {
        if other.arrival_ms > t {
            continue;
        }
        let is_ahead = (queue(other), other.arrival_ms, other.job_id.as_str()) < my_key;
        for (i, &start) in other.task_starts_ms.iter().enumerate() {
            let finish = other.task_finishes_ms[i];
            if start <= t && t < finish {
                running.push(finish - t);
            } else if start > t && is_ahead {
                ahead += other.task_durations_ms[i];
            }
        }
    }
    Ok(resistance_from_parts(
        &running,
        ahead,
        result.config.machines,
    ))
}

/// Fraction of wide, estimated jobs whose estimate selects the same queue
/// as their true total. `None` when there are no such jobs.
pub fn correct_queue_fraction(result: &SimResult, cfg: &SchedulerConfig) -> Option<f64> {
    let judged: Vec<bool> = result
        .jobs
        .iter()
        .filter(|j| j.width >= cfg.thin_limit)
        .filter_map(|j| {
            let est = j.estimate.as_ref()?;
            Some(
                queue_index_for(est.total_ms, cfg)
                    == queue_index_for(j.actual_total_ms() as f64, cfg),
            )
        })
        .collect();
    if judged.is_empty() {
        return None;
    }
    Some(judged.iter().filter(|&&ok| ok).count() as f64 / judged.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Bin {
    /// thin and small
    Bin1,
    /// wide and small
    Bin2,
    /// thin and large
    Bin3,
    /// wide and large
    Bin4,
}

impl Bin {
    pub const ALL: [Bin; 4] = [Bin::Bin1, Bin::Bin2, Bin::Bin3, Bin::Bin4];
}

pub fn bin_of(width: usize, total_ms: u64, thin_limit: usize, size_threshold_ms: u64) -> Bin {
    match (width < thin_limit, total_ms < size_threshold_ms) {
        (true, true) => Bin::Bin1,
        (false, true) => Bin::Bin2,
        (true, false) => Bin::Bin3,
        (false, false) => Bin::Bin4,
    }
}

pub fn bin_counts(result: &SimResult, thin_limit: usize) -> [usize; 4] {
    let mut counts = [0; 4];
    for j in &result.jobs {
        counts[bin_of(j.width, j.actual_total_ms(), thin_limit, SMALL_JOB_MS) as usize] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MisplacementReport {
    pub jobs: usize,
    pub overestimated_pct: f64,
    pub underestimated_pct: f64,
    pub misplaced_over_pct: f64,
    pub misplaced_under_pct: f64,
    pub mean_positive_error_pct: Option<f64>,
    pub p50_positive_error_pct: Option<f64>,
    pub mean_negative_error_pct: Option<f64>,
    pub p50_negative_error_pct: Option<f64>,
}

/// Over/under-estimation among wide estimated jobs and how often it moved
/// a job to a different queue.
pub fn misplacement_report(result: &SimResult, cfg: &SchedulerConfig) -> MisplacementReport {
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    let (mut over, mut under, mut mis_over, mut mis_under, mut n) = (0, 0, 0, 0, 0);
    for j in result.jobs.iter().filter(|j| j.width >= cfg.thin_limit) {
        let Some(est) = &j.estimate else { continue };
        let actual = j.actual_total_ms() as f64;
        let Ok(err) = prediction_error(j.job_id.clone(), est.total_ms, actual) else {
            continue;
        };
        n += 1;
        let misplaced = queue_index_for(est.total_ms, cfg) != queue_index_for(actual, cfg);
        if est.total_ms > actual {
            over += 1;
            mis_over += usize::from(misplaced);
            positive.push(err.signed_pct);
        } else if est.total_ms < actual {
            under += 1;
            mis_under += usize::from(misplaced);
            negative.push(err.signed_pct);
        }
    }
    if n == 0 {
        return MisplacementReport::default();
    }
    let pct = |k: usize| k as f64 / n as f64 * 100.0;
    MisplacementReport {
        jobs: n,
        overestimated_pct: pct(over),
        underestimated_pct: pct(under),
        misplaced_over_pct: pct(mis_over),
        misplaced_under_pct: pct(mis_under),
        mean_positive_error_pct: stats::mean(&positive),
        p50_positive_error_pct: stats::percentile(&positive, 0.5),
        mean_negative_error_pct: stats::mean(&negative),
        p50_negative_error_pct: stats::percentile(&negative, 0.5),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovRow {
    pub job_id: String,
    pub cov_time_w3: Option<f64>,
    pub cov_time_w7: Option<f64>,
    pub cov_time_w14: Option<f64>,
    pub cov_space: Option<f64>,
}

/// One row per job in `trace`, measured against `history` at each job's arrival.
pub fn cov_rows(trace: &[Job], history: &HistoryStore, sampling_ratio: f64) -> Vec<CovRow> {
    trace
        .iter()
        .map(|j| {
            let ct = |w| cov_time(history, j, j.arrival_ms(), w).ok().map(|c| c.min);
            CovRow {
                job_id: j.id().to_string(),
                cov_time_w3: ct(3),
                cov_time_w7: ct(7),
                cov_time_w14: ct(14),
                cov_space: cov_space(j.task_durations_ms(), sampling_ratio).ok(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub policy: String,
    pub seed: u64,
    pub jobs: usize,
    pub mean_jct_ms: f64,
    pub p50_jct_ms: f64,
    pub p90_jct_ms: f64,
    /// Policy the speedup columns are measured against.
    pub target: Option<String>,
    pub mean_speedup: Option<f64>,
    pub p50_speedup: Option<f64>,
    pub p90_speedup: Option<f64>,
    pub correct_queue_pct: Option<f64>,
    pub bin1: usize,
    pub bin2: usize,
    pub bin3: usize,
    pub bin4: usize,
}

impl SummaryRow {
    pub fn new(result: &SimResult) -> Self {
        let jcts: Vec<f64> = result.jobs.iter().map(|j| j.jct_ms as f64).collect();
        let [bin1, bin2, bin3, bin4] = bin_counts(result, result.config.thin_limit);
        SummaryRow {
            policy: result.policy.clone(),
            seed: result.seed,
            jobs: result.jobs.len(),
            mean_jct_ms: result.mean_jct_ms(),
            p50_jct_ms: stats::percentile(&jcts, 0.5).unwrap_or(0.0),
            p90_jct_ms: stats::percentile(&jcts, 0.9).unwrap_or(0.0),
            target: None,
            mean_speedup: None,
            p50_speedup: None,
            p90_speedup: None,
            correct_queue_pct: correct_queue_fraction(result, &result.config).map(|f| f * 100.0),
            bin1,
            bin2,
            bin3,
            bin4,
        }
    }

    /// Adds `speedup`, the JCT of this run divided by that of `target`.
    pub fn with_speedup(mut self, target: &str, speedup: &Speedup) -> Self {
        self.target = Some(target.to_string());
        self.mean_speedup = Some(speedup.mean);
        self.p50_speedup = Some(speedup.p50);
        self.p90_speedup = Some(speedup.p90);
        self
    }
}

#[derive(Serialize)]
struct CdfRow {
    value: f64,
    fraction: f64,
}

pub fn write_rows<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_file<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CsvError> {
    let file = std::fs::File::create(path)?;
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(file);
        w.write_record(header)?;
        w.flush()?;
        return Ok(());
    }
    write_rows(file, rows)
}

pub fn write_speedups(path: &Path, rows: &[SpeedupRow]) -> Result<(), CsvError> {
    write_file(path, rows, &["job_id", "ratio"])
}

pub fn write_errors(path: &Path, rows: &[ErrorRecord]) -> Result<(), CsvError> {
    write_file(path, rows, &["job_id", "signed_pct", "abs_pct"])
}

pub fn write_cov(path: &Path, rows: &[CovRow]) -> Result<(), CsvError> {
    write_file(
        path,
        rows,
        &[
            "job_id",
            "cov_time_w3",
            "cov_time_w7",
            "cov_time_w14",
            "cov_space",
        ],
    )
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CsvError> {
    write_file(path, rows, &[])
}

/// Writes a `(value, cumulative fraction)` CDF.
pub fn write_cdf(path: &Path, values: &[f64]) -> Result<(), CsvError> {
    let rows: Vec<CdfRow> = stats::cdf(values)
        .into_iter()
        .map(|(value, fraction)| CdfRow { value, fraction })
        .collect();
    write_file(path, &rows, &["value", "fraction"])
}
