//! Value types shared by every part of the simulator.
//!
//! Time is integer milliseconds everywhere. Jobs are immutable once built;
//! [`Job::new`] and [`Job::with_stages`] check the structural invariants.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds in one day, used to turn history windows into clock spans.
pub const MS_PER_DAY: u64 = 86_400_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("job {0}: task list is empty")]
    NoTasks(String),
    #[error("job {job}: task {index} has non-positive duration")]
    InvalidDuration { job: String, index: usize },
    #[error("job {0}: stage list is empty or contains an empty stage")]
    EmptyStage(String),
    #[error("job {0}: task durations do not equal the concatenation of its stages")]
    StageMismatch(String),
    #[error("job {job}: submit day {day} / hour {hour} out of range")]
    SubmitTime { job: String, day: u8, hour: u8 },
    #[error("job {job}: resource request must be finite and nonnegative")]
    ResourceRequest { job: String },
    #[error("invalid scheduler config: {0}")]
    Config(String),
}

/// The attributes history-based predictors match jobs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFeatures {
    pub application: String,
    pub job_name: String,
    pub user: String,
    pub submit_day: u8,
    pub submit_hour: u8,
    pub cpu_req: f64,
    pub mem_req: f64,
}

impl JobFeatures {
    /// Features with the submission day/hour derived from an arrival time.
    pub fn at_arrival(
        application: impl Into<String>,
        job_name: impl Into<String>,
        user: impl Into<String>,
        arrival_ms: u64,
        cpu_req: f64,
        mem_req: f64,
    ) -> Self {
        JobFeatures {
            application: application.into(),
            job_name: job_name.into(),
            user: user.into(),
            submit_day: ((arrival_ms / MS_PER_DAY) % 7) as u8,
            submit_hour: ((arrival_ms / 3_600_000) % 24) as u8,
            cpu_req,
            mem_req,
        }
    }

    fn validate(&self, job: &str) -> Result<(), DomainError> {
        if self.submit_day > 6 || self.submit_hour > 23 {
            return Err(DomainError::SubmitTime {
                job: job.to_string(),
                day: self.submit_day,
                hour: self.submit_hour,
            });
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.cpu_req) || !ok(self.mem_req) {
            return Err(DomainError::ResourceRequest {
                job: job.to_string(),
            });
        }
        Ok(())
    }
}

impl Default for JobFeatures {
    fn default() -> Self {
        JobFeatures {
            application: String::new(),
            job_name: String::new(),
            user: String::new(),
            submit_day: 0,
            submit_hour: 0,
            cpu_req: 0.0,
            mem_req: 0.0,
        }
    }
}

/// A job: a set of tasks, optionally arranged as a chain of stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    id: String,
    arrival_ms: u64,
    task_durations_ms: Vec<u64>,
    features: JobFeatures,
    stages: Option<Vec<Vec<u64>>>,
}

impl Job {
    pub fn new(
        id: impl Into<String>,
        arrival_ms: u64,
        task_durations_ms: Vec<u64>,
        features: JobFeatures,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        if task_durations_ms.is_empty() {
            return Err(DomainError::NoTasks(id));
        }
        if let Some(index) = task_durations_ms.iter().position(|&d| d == 0) {
            return Err(DomainError::InvalidDuration { job: id, index });
        }
        features.validate(&id)?;
        Ok(Job {
            id,
            arrival_ms,
            task_durations_ms,
            features,
            stages: None,
        })
    }

    /// A chain-structured job; the flat task list is the concatenation of the stages.
    pub fn with_stages(
        id: impl Into<String>,
        arrival_ms: u64,
        stages: Vec<Vec<u64>>,
        features: JobFeatures,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        if stages.is_empty() || stages.iter().any(Vec::is_empty) {
            return Err(DomainError::EmptyStage(id));
        }
        let flat: Vec<u64> = stages.iter().flatten().copied().collect();
        let mut job = Job::new(id, arrival_ms, flat, features)?;
        job.stages = Some(stages);
        Ok(job)
    }

    /// Builds a job from possibly redundant parts, as read from a trace line.
    pub fn from_parts(
        id: impl Into<String>,
        arrival_ms: u64,
        task_durations_ms: Vec<u64>,
        features: JobFeatures,
        stages: Option<Vec<Vec<u64>>>,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        match stages {
            None => Job::new(id, arrival_ms, task_durations_ms, features),
            Some(stages) => {
                let flat_matches = stages.iter().flatten().eq(task_durations_ms.iter());
                let job = Job::with_stages(id.clone(), arrival_ms, stages, features)?;
                if !flat_matches {
                    return Err(DomainError::StageMismatch(id));
                }
                Ok(job)
            }
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn arrival_ms(&self) -> u64 {
        self.arrival_ms
    }

    pub fn task_durations_ms(&self) -> &[u64] {
        &self.task_durations_ms
    }

    pub fn features(&self) -> &JobFeatures {
        &self.features
    }

    pub fn stages(&self) -> Option<&[Vec<u64>]> {
        self.stages.as_deref()
    }

    pub fn task_count(&self) -> usize {
        self.task_durations_ms.len()
    }

    pub fn is_dag(&self) -> bool {
        self.stages.is_some()
    }

    pub fn stage_count(&self) -> usize {
        self.stages.as_ref().map_or(1, Vec::len)
    }

    /// Number of tasks in each stage; a plain job is a single stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        match &self.stages {
            Some(stages) => stages.iter().map(Vec::len).collect(),
            None => vec![self.task_durations_ms.len()],
        }
    }

    /// Flat task-index range covered by `stage`.
    pub fn stage_range(&self, stage: usize) -> std::ops::Range<usize> {
        let sizes = self.stage_sizes();
        let start: usize = sizes[..stage].iter().sum();
        start..start + sizes[stage]
    }

    pub fn total_runtime_ms(&self) -> u64 {
        self.task_durations_ms.iter().sum()
    }

    pub fn mean_task_ms(&self) -> f64 {
        self.total_runtime_ms() as f64 / self.task_count() as f64
    }

    pub fn max_task_ms(&self) -> u64 {
        self.task_durations_ms.iter().copied().max().unwrap_or(0)
    }

    /// Copy of this job with features replaced (used by DAG synthesis).
    pub fn with_features(&self, features: JobFeatures) -> Self {
        Job {
            features,
            ..self.clone()
        }
    }
}

/// Width of a job: its task count, or the size of the first stage for chains.
pub fn job_width(job: &Job) -> usize {
    stage_width(job, 0)
}

/// Width of the given stage.
pub fn stage_width(job: &Job, stage: usize) -> usize {
    match job.stages() {
        Some(stages) => stages[stage].len(),
        None => job.task_count(),
    }
}

pub fn is_thin(job: &Job, thin_limit: usize) -> bool {
    job_width(job) < thin_limit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredictionSource {
    Sampling,
    History,
    PointEstimate,
    Oracle,
}

/// A runtime estimate for one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean_task_ms: f64,
    pub total_ms: f64,
    pub max_task_ms: Option<f64>,
    pub source: PredictionSource,
}

impl Prediction {
    /// Prediction whose total is `mean_task_ms` scaled by `task_count`.
    pub fn from_mean(
        mean_task_ms: f64,
        task_count: usize,
        max_task_ms: Option<f64>,
        source: PredictionSource,
    ) -> Self {
        Prediction {
            mean_task_ms,
            total_ms: mean_task_ms * task_count as f64,
            max_task_ms,
            source,
        }
    }

    /// Prediction built from a total (DAG estimates); the mean is derived from it.
    pub fn from_total(
        total_ms: f64,
        task_count: usize,
        max_task_ms: Option<f64>,
        source: PredictionSource,
    ) -> Self {
        Prediction {
            mean_task_ms: total_ms / task_count as f64,
            total_ms,
            max_task_ms,
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "ratio", rename_all = "snake_case")]
pub enum SamplingMode {
    Fixed(f64),
    Adaptive,
}

/// Parameters of the multi-queue scheduler and its predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub machines: usize,
    pub num_queues: usize,
    pub q0_hi_ms: u64,
    pub growth_factor: f64,
    pub queue_weight_decay: f64,
    pub thin_limit: usize,
    pub sampling: SamplingMode,
    pub adaptive_t: usize,
    pub window_days: u64,
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            machines: 150,
            num_queues: 10,
            q0_hi_ms: 1_000_000,
            growth_factor: 10.0,
            queue_weight_decay: 10.0,
            thin_limit: 3,
            sampling: SamplingMode::Adaptive,
            adaptive_t: 100,
            window_days: 14,
            seed: 0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |m: &str| Err(DomainError::Config(m.to_string()));
        if self.machines == 0 {
            return fail("machines must be positive");
        }
        if self.num_queues == 0 {
            return fail("num_queues must be positive");
        }
        if self.q0_hi_ms == 0 {
            return fail("q0_hi_ms must be positive");
        }
        if !(self.growth_factor > 1.0) || !self.growth_factor.is_finite() {
            return fail("growth factor must be a finite real > 1");
        }
        if !(self.queue_weight_decay > 1.0) || !self.queue_weight_decay.is_finite() {
            return fail("queue weight decay must be a finite real > 1");
        }
        if self.thin_limit == 0 {
            return fail("thin_limit must be at least 1");
        }
        if let SamplingMode::Fixed(r) = self.sampling {
            if !(r > 0.0 && r <= 1.0) {
                return fail("fixed sampling ratio must lie in (0, 1]");
            }
        }
        if self.adaptive_t == 0 {
            return fail("adaptive_t must be positive");
        }
        if self.window_days == 0 {
            return fail("window_days must be positive");
        }
        Ok(())
    }

    /// Lower edge of queue `q`'s half-open runtime interval.
    pub fn queue_lo_ms(&self, q: usize) -> f64 {
        if q == 0 {
            0.0
        } else {
            self.queue_hi_ms(q - 1)
        }
    }

    /// Upper edge of queue `q`'s interval; infinite for the last queue.
    pub fn queue_hi_ms(&self, q: usize) -> f64 {
        if q + 1 >= self.num_queues {
            f64::INFINITY
        } else {
            self.q0_hi_ms as f64 * self.growth_factor.powi(q as i32)
        }
    }

    /// Queue that holds jobs under runtime estimation.
    pub fn sampling_queue(&self) -> usize {
        1.min(self.num_queues - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    TaskFinish {
        job: String,
        task: usize,
        machine: usize,
    },
    JobArrival {
        job: String,
    },
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::TaskFinish { .. } => 0,
            EventKind::JobArrival { .. } => 1,
        }
    }

    pub fn job(&self) -> &str {
        match self {
            EventKind::TaskFinish { job, .. } | EventKind::JobArrival { job } => job,
        }
    }

    fn task(&self) -> usize {
        match self {
            EventKind::TaskFinish { task, .. } => *task,
            EventKind::JobArrival { .. } => 0,
        }
    }
}

/// A simulation event. Ordered by time, then finishes before arrivals,
/// then job id, then task index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time_ms
            .cmp(&other.time_ms)
            .then_with(|| self.kind.rank().cmp(&other.kind.rank()))
            .then_with(|| self.kind.job().cmp(other.kind.job()))
            .then_with(|| self.kind.task().cmp(&other.kind.task()))
            .then_with(|| match (&self.kind, &other.kind) {
                (
                    EventKind::TaskFinish { machine: a, .. },
                    EventKind::TaskFinish { machine: b, .. },
                ) => a.cmp(b),
                _ => Ordering::Equal,
            })
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A queue placement: from `time_ms` on, the job sat in `queue`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub time_ms: u64,
    pub queue: usize,
}

/// Outcome of one job in a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub arrival_ms: u64,
    pub width: usize,
    pub stage_sizes: Vec<usize>,
    pub task_durations_ms: Vec<u64>,
    pub estimate: Option<Prediction>,
    pub estimate_ready_ms: Option<u64>,
    pub queue_assigned: usize,
    pub placements: Vec<Placement>,
    pub pilots: Vec<usize>,
    pub sampling_ratio: Option<f64>,
    pub task_starts_ms: Vec<u64>,
    pub task_finishes_ms: Vec<u64>,
    pub jct_ms: u64,
}

impl JobRecord {
    pub fn actual_total_ms(&self) -> u64 {
        self.task_durations_ms.iter().sum()
    }

    pub fn actual_mean_task_ms(&self) -> f64 {
        self.actual_total_ms() as f64 / self.task_durations_ms.len() as f64
    }

    pub fn finish_ms(&self) -> u64 {
        self.task_finishes_ms
            .iter()
            .copied()
            .max()
            .unwrap_or(self.arrival_ms)
    }

    /// Queue the job occupied at `t` (the last placement at or before `t`).
    pub fn queue_at(&self, t: u64) -> Option<usize> {
        self.placements
            .iter()
            .take_while(|p| p.time_ms <= t)
            .last()
            .map(|p| p.queue)
    }
}

/// Everything a run produced; the input to all metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: String,
    pub config: SchedulerConfig,
    pub seed: u64,
    pub jobs: Vec<JobRecord>,
    pub events: Vec<SimEvent>,
}

impl SimResult {
    pub fn job(&self, id: &str) -> Option<&JobRecord> {
        self.jobs.iter().find(|j| j.job_id == id)
    }

    pub fn mean_jct_ms(&self) -> f64 {
        if self.jobs.is_empty() {
            return 0.0;
        }
        self.jobs.iter().map(|j| j.jct_ms as f64).sum::<f64>() / self.jobs.len() as f64
    }
}
