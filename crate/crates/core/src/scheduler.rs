//! Multi-level priority queue scheduler.
//!
//! Jobs sit in one of `N` queues by (estimated) total runtime; queue `q`
//! covers `[Q_lo(q), Q_hi(q))` with exponentially growing edges. Within a
//! queue jobs are served FIFO by `(arrival, id)`; across queues every free
//! slot goes to the queue whose weight most exceeds its share of service so
//! far. Under the sampling policy a wide job first waits in the sampling
//! queue (queue 1) with only its pilot tasks runnable; once the pilots
//! finish it moves to the queue its estimate selects. Idle slots that no
//! queue can use run the remaining tasks of jobs still being sampled, oldest
//! first, so the cluster is never idle while work is pending.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    is_thin, job_width, stage_width, DomainError, Job, Placement, Prediction, PredictionSource,
    SamplingMode, SchedulerConfig,
};
use crate::predictors::{
    feature_predictions, oracle_predict, pilot_count, predict_with_fallback, record_completion,
    select_pilots, slearn_dag_estimate, slearn_estimate, three_sigma_dag_estimate,
    HistoryEstimator, HistoryRecord, HistoryStore, PredictError, SamplerState,
};
use crate::rng;

/// Surplus differences below this are ties, broken toward the higher-priority queue.
const SURPLUS_TIE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("duplicate job id {0}")]
    DuplicateJob(String),
    #[error(transparent)]
    Config(#[from] DomainError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    SLearn,
    ThreeSigma,
    ThreeSigmaTl,
    PointEst,
    Las,
    Fifo,
    Oracle,
    SLearnDag,
    ThreeSigmaDag,
}

impl Policy {
    pub const ALL: [Policy; 9] = [
        Policy::SLearn,
        Policy::ThreeSigma,
        Policy::ThreeSigmaTl,
        Policy::PointEst,
        Policy::Las,
        Policy::Fifo,
        Policy::Oracle,
        Policy::SLearnDag,
        Policy::ThreeSigmaDag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::SLearn => "slearn",
            Policy::ThreeSigma => "3sigma",
            Policy::ThreeSigmaTl => "3sigma-tl",
            Policy::PointEst => "point-est",
            Policy::Las => "las",
            Policy::Fifo => "fifo",
            Policy::Oracle => "oracle",
            Policy::SLearnDag => "slearn-dag",
            Policy::ThreeSigmaDag => "3sigma-dag",
        }
    }

    /// Whether the policy predicts from a history store.
    pub fn uses_history(self) -> bool {
        matches!(
            self,
            Policy::ThreeSigma
                | Policy::ThreeSigmaTl
                | Policy::PointEst
                | Policy::SLearnDag
                | Policy::ThreeSigmaDag
        )
    }

    /// Estimator used to turn matching history into a point prediction.
    pub fn estimator(self) -> HistoryEstimator {
        match self {
            Policy::PointEst => HistoryEstimator::Median,
            _ => HistoryEstimator::Utility,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

/// Smallest queue whose upper edge exceeds `total_estimate_ms`.
pub fn queue_index_for(total_estimate_ms: f64, cfg: &SchedulerConfig) -> usize {
    (0..cfg.num_queues)
        .find(|&q| total_estimate_ms < cfg.queue_hi_ms(q))
        .unwrap_or(cfg.num_queues - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobPhase {
    /// Pilot tasks running; only they are offered by the queue.
    Sampling,
    /// Placed by a runtime estimate.
    Estimated,
    /// Thin job sent straight to the top queue.
    ThinBypass,
    /// Placed without an estimate (FIFO, LAS).
    Queued,
    Finished,
}

/// Per-job scheduling state.
#[derive(Debug, Clone)]
pub struct JobRuntimeState {
    pub phase: JobPhase,
    pub pilots: Vec<usize>,
    pub pilots_done: usize,
    pub estimate: Option<Prediction>,
    pub estimate_ready_ms: Option<u64>,
    pub sampling_ratio: Option<f64>,
    pub placements: Vec<Placement>,
    /// position in `(arrival, id)` order; the FIFO key inside every queue
    rank: usize,
    queue: usize,
    in_queue: Option<usize>,
    in_pool: bool,
    stage: usize,
    stage_unfinished: usize,
    started: Vec<bool>,
    is_pilot: Vec<bool>,
    cursor: usize,
    pilot_cursor: usize,
    pilot_durations: Vec<f64>,
    completed_service_ms: u64,
    running: u64,
    running_start_sum: u64,
}

impl JobRuntimeState {
    pub fn queue(&self) -> usize {
        self.queue
    }

    /// Completed task time plus elapsed time of running tasks at `now`.
    pub fn attained_service_ms(&self, now: u64) -> u64 {
        self.completed_service_ms + self.running * now - self.running_start_sum
    }
}

pub struct Scheduler {
    policy: Policy,
    cfg: SchedulerConfig,
    jobs: Vec<Job>,
    states: Vec<JobRuntimeState>,
    by_rank: Vec<usize>,
    queues: Vec<BTreeSet<usize>>,
    pool: BTreeSet<usize>,
    served_ms: Vec<f64>,
    history: Option<HistoryStore>,
    sampler: SamplerState,
    rng: ChaCha8Rng,
}

impl Scheduler {
    /// Prepares a scheduler for `jobs`; history-based policies start from `history`.
    pub fn new(
        jobs: Vec<Job>,
        policy: Policy,
        cfg: SchedulerConfig,
        history: Option<HistoryStore>,
    ) -> Result<Self, SchedError> {
        cfg.validate()?;
        let mut ids = HashMap::with_capacity(jobs.len());
        for (i, j) in jobs.iter().enumerate() {
            if ids.insert(j.id(), i).is_some() {
                return Err(SchedError::DuplicateJob(j.id().to_string()));
            }
        }
        let mut by_rank: Vec<usize> = (0..jobs.len()).collect();
        by_rank.sort_by(|&a, &b| {
            (jobs[a].arrival_ms(), jobs[a].id()).cmp(&(jobs[b].arrival_ms(), jobs[b].id()))
        });
        let mut rank_of = vec![0; jobs.len()];
        for (r, &j) in by_rank.iter().enumerate() {
            rank_of[j] = r;
        }
        let states = jobs
            .iter()
            .zip(rank_of)
            .map(|(j, rank)| JobRuntimeState {
                phase: JobPhase::Queued,
                pilots: Vec::new(),
                pilots_done: 0,
                estimate: None,
                estimate_ready_ms: None,
                sampling_ratio: None,
                placements: Vec::new(),
                rank,
                queue: 0,
                in_queue: None,
                in_pool: false,
                stage: 0,
                stage_unfinished: stage_width(j, 0),
                started: vec![false; j.task_count()],
                is_pilot: vec![false; j.task_count()],
                cursor: 0,
                pilot_cursor: 0,
                pilot_durations: Vec::new(),
                completed_service_ms: 0,
                running: 0,
                running_start_sum: 0,
            })
            .collect();
        let history = if policy.uses_history() {
            Some(history.unwrap_or_default())
        } else {
            None
        };
        Ok(Scheduler {
            policy,
            sampler: SamplerState::new(cfg.adaptive_t),
            rng: rng::substream(cfg.seed, rng::PILOTS),
            queues: vec![BTreeSet::new(); cfg.num_queues],
            served_ms: vec![0.0; cfg.num_queues],
            cfg,
            jobs,
            states,
            by_rank,
            pool: BTreeSet::new(),
            history,
        })
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn jobs(&self) -> &[Job] {
        &self.jobs
    }

    pub fn state(&self, job: usize) -> &JobRuntimeState {
        &self.states[job]
    }

    pub fn history(&self) -> Option<&HistoryStore> {
        self.history.as_ref()
    }

    pub fn sampler(&self) -> &SamplerState {
        &self.sampler
    }

    pub fn served_ms(&self) -> &[f64] {
        &self.served_ms
    }

    /// Jobs currently offered by queue `q`, in service order.
    pub fn queue_members(&self, q: usize) -> Vec<&str> {
        self.queues[q]
            .iter()
            .map(|&r| self.jobs[self.by_rank[r]].id())
            .collect()
    }

    fn history_mean(&self, job: usize, now: u64) -> Prediction {
        let store = self.history.as_ref().expect("history policy without store");
        predict_with_fallback(
            store,
            &self.jobs[job],
            now,
            self.cfg.window_days,
            self.policy.estimator(),
            self.cfg.q0_hi_ms as f64,
        )
    }

    fn place(&mut self, job: usize, queue: usize, now: u64) {
        let st = &mut self.states[job];
        st.queue = queue;
        if st.placements.last().map(|p| p.queue) != Some(queue) {
            st.placements.push(Placement {
                time_ms: now,
                queue,
            });
        }
        self.refresh_membership(job);
    }

    fn has_offerable(&self, job: usize) -> bool {
        let st = &self.states[job];
        match st.phase {
            JobPhase::Finished => false,
            JobPhase::Sampling => st.pilot_cursor < st.pilots.len(),
            _ => self.next_unstarted(job, false).is_some(),
        }
    }

    fn has_pool_work(&self, job: usize) -> bool {
        self.states[job].phase == JobPhase::Sampling && self.next_unstarted(job, true).is_some()
    }

    /// Keeps queue and pool membership in sync with what the job can offer.
    fn refresh_membership(&mut self, job: usize) {
        let rank = self.states[job].rank;
        let want_queue = self.has_offerable(job).then_some(self.states[job].queue);
        if self.states[job].in_queue != want_queue {
            if let Some(q) = self.states[job].in_queue {
                self.queues[q].remove(&rank);
            }
            if let Some(q) = want_queue {
                self.queues[q].insert(rank);
            }
            self.states[job].in_queue = want_queue;
        }
        let want_pool = self.has_pool_work(job);
        if self.states[job].in_pool != want_pool {
            if want_pool {
                self.pool.insert(rank);
            } else {
                self.pool.remove(&rank);
            }
            self.states[job].in_pool = want_pool;
        }
    }

    /// First unstarted task of the current stage; `skip_pilots` leaves pilots out.
    fn next_unstarted(&self, job: usize, skip_pilots: bool) -> Option<usize> {
        let st = &self.states[job];
        let range = self.jobs[job].stage_range(st.stage);
        (st.cursor.max(range.start)..range.end)
            .find(|&t| !st.started[t] && !(skip_pilots && st.is_pilot[t]))
    }

    /// Admits a newly arrived job.
    pub fn on_job_arrival(&mut self, job: usize, now: u64) -> Result<(), SchedError> {
        let width = job_width(&self.jobs[job]);
        let thin = is_thin(&self.jobs[job], self.cfg.thin_limit);
        let is_dag = self.jobs[job].is_dag();
        match self.policy {
            Policy::SLearn if thin => self.bypass(job, now, None),
            Policy::SLearnDag if thin && !is_dag => self.bypass(job, now, None),
            Policy::SLearn | Policy::SLearnDag => self.start_sampling(job, width, now)?,
            Policy::ThreeSigmaTl if thin => {
                let est = self.history_mean(job, now);
                self.bypass(job, now, Some(est));
            }
            Policy::ThreeSigma | Policy::ThreeSigmaTl | Policy::PointEst => {
                let est = self.history_mean(job, now);
                self.estimated(job, est, now);
            }
            Policy::ThreeSigmaDag => {
                let est = self.dag_history_estimate(job, now)?;
                self.estimated(job, est, now);
            }
            Policy::Oracle => {
                let est = oracle_predict(&self.jobs[job]);
                self.estimated(job, est, now);
            }
            Policy::Las | Policy::Fifo => {
                self.states[job].phase = JobPhase::Queued;
                self.place(job, 0, now);
            }
        }
        Ok(())
    }

    fn bypass(&mut self, job: usize, now: u64, estimate: Option<Prediction>) {
        let st = &mut self.states[job];
        st.phase = JobPhase::ThinBypass;
        if estimate.is_some() {
            st.estimate_ready_ms = Some(now);
        }
        st.estimate = estimate;
        self.place(job, 0, now);
    }

    fn estimated(&mut self, job: usize, estimate: Prediction, now: u64) {
        let q = queue_index_for(estimate.total_ms, &self.cfg);
        let st = &mut self.states[job];
        st.phase = JobPhase::Estimated;
        st.estimate = Some(estimate);
        st.estimate_ready_ms = Some(now);
        self.place(job, q, now);
    }

    fn start_sampling(&mut self, job: usize, width: usize, now: u64) -> Result<(), SchedError> {
        let ratio = match self.cfg.sampling {
            SamplingMode::Fixed(r) => r,
            SamplingMode::Adaptive => self.sampler.next_ratio(),
        };
        let pilots = select_pilots(width, pilot_count(width, ratio), &mut self.rng)?;
        let st = &mut self.states[job];
        for &p in &pilots {
            st.is_pilot[p] = true;
        }
        st.pilots = pilots;
        st.sampling_ratio = Some(ratio);
        st.phase = JobPhase::Sampling;
        let q = self.cfg.sampling_queue();
        self.place(job, q, now);
        Ok(())
    }

    fn dag_history_estimate(&self, job: usize, now: u64) -> Result<Prediction, SchedError> {
        let j = &self.jobs[job];
        let hist = self.history_mean(job, now);
        let stages: Vec<f64> = j
            .stage_sizes()
            .iter()
            .map(|&w| hist.mean_task_ms * w as f64)
            .collect();
        let total = three_sigma_dag_estimate(&stages)?;
        Ok(Prediction::from_total(
            total,
            j.task_count(),
            hist.max_task_ms,
            PredictionSource::History,
        ))
    }

    /// Turns finished pilots into an estimate and moves the job to its queue.
    pub fn on_pilots_complete(&mut self, job: usize, now: u64) -> Result<(), SchedError> {
        let j = &self.jobs[job];
        let samples = self.states[job].pilot_durations.clone();
        let estimate = if self.policy == Policy::SLearnDag && j.is_dag() {
            let width0 = stage_width(j, 0);
            let sampled = slearn_estimate(&samples, width0)?;
            let hist = self.history_mean(job, now);
            let d_h = hist.mean_task_ms * width0 as f64;
            let rest: Vec<f64> = j.stage_sizes()[1..]
                .iter()
                .map(|&w| hist.mean_task_ms * w as f64)
                .collect();
            let total = slearn_dag_estimate(sampled.total_ms, d_h, &rest)?;
            Prediction::from_total(
                total,
                j.task_count(),
                sampled.max_task_ms,
                PredictionSource::Sampling,
            )
        } else {
            // a chain-structured job under a DAG-unaware policy extrapolates to all its tasks
            slearn_estimate(&samples, j.task_count())?
        };
        self.estimated(job, estimate, now);
        Ok(())
    }

    /// Weighted-sharing choice among queues that can offer a task.
    fn pick_queue(&self) -> Option<usize> {
        let eligible: Vec<usize> = (0..self.queues.len())
            .filter(|&q| !self.queues[q].is_empty())
            .collect();
        let weight = |q: usize| self.cfg.queue_weight_decay.powi(-(q as i32));
        let wsum: f64 = eligible.iter().map(|&q| weight(q)).sum();
        let ssum: f64 = eligible.iter().map(|&q| self.served_ms[q]).sum();
        let mut best: Option<(usize, f64)> = None;
        for &q in &eligible {
            let usage = if ssum > 0.0 {
                self.served_ms[q] / ssum
            } else {
                0.0
            };
            let surplus = weight(q) / wsum - usage;
            match best {
                Some((_, b)) if surplus <= b + SURPLUS_TIE => {}
                _ => best = Some((q, surplus)),
            }
        }
        best.map(|(q, _)| q)
    }

    fn take_task(&mut self, job: usize, from_pool: bool) -> usize {
        let st = &self.states[job];
        let task = if st.phase == JobPhase::Sampling && !from_pool {
            st.pilots[st.pilot_cursor]
        } else {
            self.next_unstarted(job, st.phase == JobPhase::Sampling)
                .expect("job offered without unstarted task")
        };
        let st = &mut self.states[job];
        st.started[task] = true;
        if st.phase == JobPhase::Sampling && !from_pool {
            st.pilot_cursor += 1;
        }
        while st.cursor < st.started.len() && st.started[st.cursor] {
            st.cursor += 1;
        }
        task
    }

    /// Assigns up to `free_machines` tasks. Returns `(job, task)` pairs in
    /// dispatch order; the caller supplies durations and machines.
    pub fn dispatch(&mut self, free_machines: usize, now: u64) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(free_machines);
        for _ in 0..free_machines {
            let (job, task) = if let Some(q) = self.pick_queue() {
                let rank = *self.queues[q].first().expect("eligible queue is empty");
                let job = self.by_rank[rank];
                let task = self.take_task(job, false);
                self.served_ms[q] += self.jobs[job].task_durations_ms()[task] as f64;
                (job, task)
            } else if let Some(&rank) = self.pool.first() {
                let job = self.by_rank[rank];
                (job, self.take_task(job, true))
            } else {
                break;
            };
            let st = &mut self.states[job];
            st.running += 1;
            st.running_start_sum += now;
            self.refresh_membership(job);
            out.push((job, task));
        }
        out
    }

    /// Books a finished task. Returns `true` when the whole job has finished.
    pub fn on_task_finish(
        &mut self,
        job: usize,
        task: usize,
        now: u64,
    ) -> Result<bool, SchedError> {
        let duration = self.jobs[job].task_durations_ms()[task];
        {
            let st = &mut self.states[job];
            st.running -= 1;
            st.running_start_sum -= now - duration;
            st.completed_service_ms += duration;
            st.stage_unfinished -= 1;
        }
        if self.states[job].is_pilot[task] {
            let st = &mut self.states[job];
            st.pilots_done += 1;
            st.pilot_durations.push(duration as f64);
            if st.phase == JobPhase::Sampling && st.pilots_done == st.pilots.len() {
                self.on_pilots_complete(job, now)?;
            }
        }
        if self.policy == Policy::Las {
            let attained = self.states[job].attained_service_ms(now) as f64;
            let q = if attained > 0.0 {
                queue_index_for(attained, &self.cfg)
            } else {
                0
            };
            if q != self.states[job].queue {
                self.place(job, q, now);
            }
        }
        if self.states[job].stage_unfinished > 0 {
            return Ok(false);
        }
        let next = self.states[job].stage + 1;
        if next < self.jobs[job].stage_count() {
            let st = &mut self.states[job];
            st.stage = next;
            st.stage_unfinished = stage_width(&self.jobs[job], next);
            self.refresh_membership(job);
            return Ok(false);
        }
        self.finish(job, now)?;
        Ok(true)
    }

    fn finish(&mut self, job: usize, now: u64) -> Result<(), SchedError> {
        self.states[job].phase = JobPhase::Finished;
        self.refresh_membership(job);
        let j = &self.jobs[job];
        if let Some(ratio) = self.states[job].sampling_ratio {
            if self.cfg.sampling == SamplingMode::Adaptive {
                let jct = (now - j.arrival_ms()) as f64;
                self.sampler
                    .score_update(ratio, jct, j.total_runtime_ms() as f64);
            }
        }
        if let Some(store) = self.history.as_mut() {
            let preds = feature_predictions(
                store,
                j.features(),
                now,
                self.cfg.window_days,
                self.policy.estimator(),
            );
            record_completion(store, HistoryRecord::from_job(j, now), &preds)?;
        }
        Ok(())
    }
}
