//! Trace files, trace preprocessing and synthetic workloads.
//!
//! A trace is line-delimited JSON, one job per line:
//!
//! ```text
//! {"job_id": "j1", "arrival_ms": 0, "task_durations_ms": [1200, 900],
//!  "features": {"application": "etl", "job_name": "daily", "user": "ana",
//!               "submit_day": 0, "submit_hour": 0, "cpu_req": 1.0, "mem_req": 2.0},
//!  "stages": [[1200], [900]]}
//! ```
//!
//! `stages` is optional; when present `task_durations_ms` must equal the
//! concatenation of the stages.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{job_width, DomainError, Job, JobFeatures};
use crate::predictors::{
    feature_predictions, record_completion, HistoryEstimator, HistoryRecord, HistoryStore,
};
use crate::rng;
use crate::stats;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: task {index} has non-positive duration")]
    InvalidDuration { line: usize, index: usize },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: DomainError },
    #[error("invalid generator spec: {0}")]
    Spec(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceLine {
    job_id: String,
    arrival_ms: u64,
    task_durations_ms: Vec<i64>,
    features: JobFeatures,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stages: Option<Vec<Vec<i64>>>,
}

fn positive(values: &[i64], line: usize) -> Result<Vec<u64>, TraceError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &d)| {
            if d > 0 {
                Ok(d as u64)
            } else {
                Err(TraceError::InvalidDuration { line, index })
            }
        })
        .collect()
}

/// Parses a trace from any reader; jobs come back sorted by arrival (stable).
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<Job>, TraceError> {
    let mut jobs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: TraceLine = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let durations = positive(&raw.task_durations_ms, line_no)?;
        let stages = raw
            .stages
            .map(|s| s.iter().map(|st| positive(st, line_no)).collect())
            .transpose()?;
        let job = Job::from_parts(raw.job_id, raw.arrival_ms, durations, raw.features, stages)
            .map_err(|source| TraceError::Invalid {
                line: line_no,
                source,
            })?;
        jobs.push(job);
    }
    jobs.sort_by_key(Job::arrival_ms);
    Ok(jobs)
}

pub fn parse_trace(path: impl AsRef<Path>) -> Result<Vec<Job>, TraceError> {
    read_trace(File::open(path)?)
}

pub fn write_trace_to<W: Write>(jobs: &[Job], writer: W) -> Result<(), TraceError> {
    let mut w = BufWriter::new(writer);
    for job in jobs {
        let line = TraceLine {
            job_id: job.id().to_string(),
            arrival_ms: job.arrival_ms(),
            task_durations_ms: job.task_durations_ms().iter().map(|&d| d as i64).collect(),
            features: job.features().clone(),
            stages: job.stages().map(|s| {
                s.iter()
                    .map(|st| st.iter().map(|&d| d as i64).collect())
                    .collect()
            }),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| TraceError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(jobs: &[Job], path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_trace_to(jobs, File::create(path)?)
}

/// Drops jobs wider than `max_width`, keeping order.
pub fn cap_width(jobs: &[Job], max_width: usize) -> Vec<Job> {
    jobs.iter()
        .filter(|j| job_width(j) <= max_width)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Poisson arrivals at `rate_per_s` jobs per second.
    Poisson {
        rate_per_s: f64,
    },
    Explicit(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthLaw {
    Uniform {
        min: usize,
        max: usize,
    },
    /// Log-normal with the given log-space parameters, rounded and clamped.
    LogNormal {
        mu: f64,
        sigma: f64,
        min: usize,
        max: usize,
    },
}

/// Parameters of the synthetic workload generator. Each job draws a mean
/// task length from `N(mu_ms, sigma0_ms^2)` and its tasks from
/// `N(mean, sigma1_ms^2)`; both are truncated to positive values by redrawing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_jobs: usize,
    pub arrival: ArrivalProcess,
    pub width: WidthLaw,
    pub mu_ms: f64,
    pub sigma0_ms: f64,
    pub sigma1_ms: f64,
    pub apps: usize,
    pub users: usize,
    pub names: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_jobs: 500,
            arrival: ArrivalProcess::Poisson { rate_per_s: 0.1 },
            width: WidthLaw::Uniform { min: 1, max: 100 },
            mu_ms: 100_000.0,
            sigma0_ms: 50_000.0,
            sigma1_ms: 10_000.0,
            apps: 5,
            users: 10,
            names: 20,
            seed: 0,
        }
    }
}

const CPU_CHOICES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const MEM_CHOICES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

impl SynthSpec {
    fn validate(&self) -> Result<(), TraceError> {
        let fail = |m: &str| Err(TraceError::Spec(m.to_string()));
        if !(self.mu_ms > 0.0) {
            return fail("mu_ms must be positive");
        }
        if !(self.sigma0_ms >= 0.0) || !(self.sigma1_ms >= 0.0) {
            return fail("sigmas must be nonnegative");
        }
        if self.apps == 0 || self.users == 0 || self.names == 0 {
            return fail("feature pools must be nonempty");
        }
        match &self.width {
            WidthLaw::Uniform { min, max } | WidthLaw::LogNormal { min, max, .. } => {
                if *min == 0 || min > max {
                    return fail("width bounds must satisfy 1 <= min <= max");
                }
            }
        }
        match &self.arrival {
            ArrivalProcess::Poisson { rate_per_s } if !(*rate_per_s > 0.0) => {
                fail("arrival rate must be positive")
            }
            ArrivalProcess::Explicit(times) if times.len() != self.n_jobs => {
                fail("explicit arrival list must have one entry per job")
            }
            _ => Ok(()),
        }
    }
}

fn positive_normal<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let dist = Normal::new(mean, sd).expect("finite normal parameters");
    loop {
        let v = dist.sample(rng);
        if v > 0.0 {
            return v;
        }
    }
}

/// Draws a synthetic trace; identical specs give identical traces.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<Job>, TraceError> {
    spec.validate()?;
    let mut rng = rng::substream(spec.seed, rng::GENERATE);
    let mut clock = 0.0_f64;
    let mut jobs = Vec::with_capacity(spec.n_jobs);
    for i in 0..spec.n_jobs {
        let arrival_ms = match &spec.arrival {
            ArrivalProcess::Poisson { rate_per_s } => {
                let gap_s: f64 = Exp::new(*rate_per_s)
                    .expect("positive rate")
                    .sample(&mut rng);
                clock += gap_s * 1000.0;
                clock.round() as u64
            }
            ArrivalProcess::Explicit(times) => times[i],
        };
        let width = match spec.width {
            WidthLaw::Uniform { min, max } => rng.random_range(min..=max),
            WidthLaw::LogNormal {
                mu,
                sigma,
                min,
                max,
            } => {
                let w: f64 = LogNormal::new(mu, sigma)
                    .map_err(|e| TraceError::Spec(e.to_string()))?
                    .sample(&mut rng);
                (w.round() as usize).clamp(min, max)
            }
        };
        let job_mean = positive_normal(&mut rng, spec.mu_ms, spec.sigma0_ms);
        let durations: Vec<u64> = (0..width)
            .map(|_| (positive_normal(&mut rng, job_mean, spec.sigma1_ms).round() as u64).max(1))
            .collect();
        let features = JobFeatures::at_arrival(
            format!("app-{}", rng.random_range(0..spec.apps)),
            format!("job-{}", rng.random_range(0..spec.names)),
            format!("user-{}", rng.random_range(0..spec.users)),
            arrival_ms,
            CPU_CHOICES[rng.random_range(0..CPU_CHOICES.len())],
            MEM_CHOICES[rng.random_range(0..MEM_CHOICES.len())],
        );
        let job =
            Job::new(format!("job{i:06}"), arrival_ms, durations, features).map_err(|source| {
                TraceError::Invalid {
                    line: i + 1,
                    source,
                }
            })?;
        jobs.push(job);
    }
    jobs.sort_by_key(Job::arrival_ms);
    Ok(jobs)
}

/// DAG trace plus how it was grouped.
#[derive(Debug, Clone, PartialEq)]
pub struct DagTrace {
    pub jobs: Vec<Job>,
    pub group_sizes: Vec<usize>,
    /// The last group ran out of base jobs and has fewer than two stages.
    pub short_tail: bool,
}

/// Chains consecutive base jobs into DAG jobs of the given group sizes.
/// Each base job becomes one stage; the DAG takes its first member's arrival,
/// and every stage shares the first member's features.
pub fn group_into_dags(base: &[Job], sizes: &[usize]) -> DagTrace {
    let mut jobs = Vec::new();
    let mut used = Vec::new();
    let mut rest = base;
    for &k in sizes {
        if rest.is_empty() {
            break;
        }
        let take = k.clamp(1, rest.len());
        let (group, tail) = rest.split_at(take);
        rest = tail;
        let first = &group[0];
        let stages: Vec<Vec<u64>> = group
            .iter()
            .map(|j| j.task_durations_ms().to_vec())
            .collect();
        let dag = Job::with_stages(
            format!("dag-{}", first.id()),
            first.arrival_ms(),
            stages,
            first.features().clone(),
        )
        .expect("stages copied from valid jobs");
        jobs.push(dag);
        used.push(take);
    }
    let short_tail = used.last().is_some_and(|&k| k < 2);
    DagTrace {
        jobs,
        group_sizes: used,
        short_tail,
    }
}

/// Groups base jobs into chains of 2 to 5 stages drawn uniformly per `seed`.
pub fn gen_dag_trace(base: &[Job], seed: u64) -> Result<DagTrace, TraceError> {
    if base.is_empty() {
        return Err(TraceError::Spec("base trace is empty".into()));
    }
    let mut rng = rng::substream(seed, rng::DAG_GROUPING);
    let mut sizes = Vec::new();
    let mut covered = 0;
    while covered < base.len() {
        let k = rng.random_range(2..=5);
        sizes.push(k);
        covered += k;
    }
    Ok(group_into_dags(base, &sizes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadStats {
    /// `(window start ms, load)` per window
    pub windows: Vec<(u64, f64)>,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

/// Offered load per sliding window: total runtime of jobs arriving in the
/// window divided by machine count times window length. Windows start at the
/// first arrival and slide until they pass the last one.
pub fn load_windows(jobs: &[Job], machines: usize, window_ms: u64, slide_ms: u64) -> LoadStats {
    assert!(machines >= 1 && window_ms > 0 && slide_ms > 0);
    let mut arrivals: Vec<(u64, u64)> = jobs
        .iter()
        .map(|j| (j.arrival_ms(), j.total_runtime_ms()))
        .collect();
    arrivals.sort_unstable();
    let mut prefix = vec![0u128; arrivals.len() + 1];
    for (i, &(_, w)) in arrivals.iter().enumerate() {
        prefix[i + 1] = prefix[i] + u128::from(w);
    }
    let (Some(&(first, _)), Some(&(last, _))) = (arrivals.first(), arrivals.last()) else {
        return LoadStats {
            windows: Vec::new(),
            mean: 0.0,
            p50: 0.0,
            p90: 0.0,
        };
    };
    let capacity = machines as f64 * window_ms as f64;
    let mut windows = Vec::new();
    let mut start = first;
    while start <= last {
        let lo = arrivals.partition_point(|a| a.0 < start);
        let hi = arrivals.partition_point(|a| a.0 < start + window_ms);
        windows.push((start, (prefix[hi] - prefix[lo]) as f64 / capacity));
        start += slide_ms;
    }
    let loads: Vec<f64> = windows.iter().map(|w| w.1).collect();
    LoadStats {
        mean: stats::mean(&loads).unwrap_or(0.0),
        p50: stats::percentile(&loads, 0.5).unwrap_or(0.0),
        p90: stats::percentile(&loads, 0.9).unwrap_or(0.0),
        windows,
    }
}

/// Completion time a job would have if it ran alone on an unbounded cluster.
pub fn isolated_completion_ms(job: &Job) -> u64 {
    match job.stages() {
        Some(stages) => {
            job.arrival_ms() + stages.iter().map(|s| s.iter().max().unwrap()).sum::<u64>()
        }
        None => job.arrival_ms() + job.max_task_ms(),
    }
}

/// Splits a trace chronologically: the first `fraction` of jobs become history.
pub fn split_history(jobs: &[Job], fraction: f64) -> (Vec<Job>, Vec<Job>) {
    let cut = ((jobs.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    (jobs[..cut].to_vec(), jobs[cut..].to_vec())
}

/// History store from already-completed jobs. Each job completes at its
/// isolated completion time, capped at `cutoff_ms` so the store never holds
/// records from after the evaluation period starts.
pub fn build_history(
    prefix: &[Job],
    cutoff_ms: Option<u64>,
    window_days: u64,
    estimator: HistoryEstimator,
) -> HistoryStore {
    let mut done: Vec<(u64, &Job)> = prefix
        .iter()
        .map(|j| {
            let t = isolated_completion_ms(j);
            (cutoff_ms.map_or(t, |c| t.min(c)), j)
        })
        .collect();
    done.sort_by(|a, b| (a.0, a.1.id()).cmp(&(b.0, b.1.id())));
    let mut store = HistoryStore::new();
    for (t, job) in done {
        let preds = feature_predictions(&store, job.features(), t, window_days, estimator);
        record_completion(&mut store, HistoryRecord::from_job(job, t), &preds)
            .expect("records inserted in completion order");
    }
    store
}
