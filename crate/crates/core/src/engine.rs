//! Deterministic discrete-event loop.
//!
//! Events are job arrivals and task completions, processed in the total
//! order defined on [`SimEvent`]. Idle machines are handed to the scheduler
//! once every event sharing a timestamp has been applied, so same-instant
//! arrivals compete on priority rather than on processing order.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use thiserror::Error;

use crate::domain::{EventKind, Job, JobRecord, SchedulerConfig, SimEvent, SimResult};
use crate::predictors::HistoryStore;
use crate::scheduler::{Policy, SchedError, Scheduler};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trace is not sorted by arrival (job {0})")]
    UnsortedTrace(String),
    #[error("duplicate job id {0}")]
    DuplicateJob(String),
    #[error("no more events")]
    NoMoreEvents,
    #[error("simulation stalled with {0} unfinished jobs")]
    Stalled(usize),
    #[error(transparent)]
    Sched(SchedError),
}

impl From<SchedError> for SimError {
    fn from(e: SchedError) -> Self {
        match e {
            SchedError::DuplicateJob(id) => SimError::DuplicateJob(id),
            other => SimError::Sched(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Running {
    job: usize,
    task: usize,
}

/// Mutable world of one simulation run.
pub struct Simulation {
    clock_ms: u64,
    machines: Vec<Option<Running>>,
    idle: BTreeSet<usize>,
    heap: BinaryHeap<Reverse<SimEvent>>,
    scheduler: Scheduler,
    index: HashMap<String, usize>,
    starts: Vec<Vec<Option<u64>>>,
    finishes: Vec<Vec<Option<u64>>>,
    unfinished: usize,
    log: Vec<SimEvent>,
}

impl Simulation {
    pub fn new(
        trace: Vec<Job>,
        policy: Policy,
        cfg: SchedulerConfig,
        history: Option<HistoryStore>,
    ) -> Result<Self, SimError> {
        if let Some(w) = trace
            .windows(2)
            .find(|w| w[1].arrival_ms() < w[0].arrival_ms())
        {
            return Err(SimError::UnsortedTrace(w[1].id().to_string()));
        }
        let mut index = HashMap::with_capacity(trace.len());
        for (i, j) in trace.iter().enumerate() {
            if index.insert(j.id().to_string(), i).is_some() {
                return Err(SimError::DuplicateJob(j.id().to_string()));
            }
        }
        let heap = trace
            .iter()
            .map(|j| {
                Reverse(SimEvent {
                    time_ms: j.arrival_ms(),
                    kind: EventKind::JobArrival {
                        job: j.id().to_string(),
                    },
                })
            })
            .collect();
        let starts = trace.iter().map(|j| vec![None; j.task_count()]).collect();
        let finishes = trace.iter().map(|j| vec![None; j.task_count()]).collect();
        let machines = cfg.machines;
        let unfinished = trace.len();
        Ok(Simulation {
            clock_ms: 0,
            machines: vec![None; machines],
            idle: (0..machines).collect(),
            heap,
            scheduler: Scheduler::new(trace, policy, cfg, history)?,
            index,
            starts,
            finishes,
            unfinished,
            log: Vec::new(),
        })
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn idle_machines(&self) -> usize {
        self.idle.len()
    }

    pub fn pending_events(&self) -> usize {
        self.heap.len()
    }

    pub fn peek(&self) -> Option<&SimEvent> {
        self.heap.peek().map(|Reverse(e)| e)
    }

    /// Processes the least pending event. Idle machines are dispatched once
    /// no further event shares its timestamp.
    pub fn step(&mut self) -> Result<SimEvent, SimError> {
        let Reverse(event) = self.heap.pop().ok_or(SimError::NoMoreEvents)?;
        debug_assert!(event.time_ms >= self.clock_ms);
        self.clock_ms = event.time_ms;
        let now = self.clock_ms;
        match &event.kind {
            EventKind::JobArrival { job } => {
                let j = self.index[job];
                self.scheduler.on_job_arrival(j, now)?;
            }
            EventKind::TaskFinish { job, task, machine } => {
                let j = self.index[job];
                debug_assert_eq!(
                    self.machines[*machine],
                    Some(Running {
                        job: j,
                        task: *task
                    })
                );
                self.machines[*machine] = None;
                self.idle.insert(*machine);
                self.finishes[j][*task] = Some(now);
                if self.scheduler.on_task_finish(j, *task, now)? {
                    self.unfinished -= 1;
                }
            }
        }
        self.log.push(event.clone());
        if self.peek().is_none_or(|next| next.time_ms != now) {
            self.dispatch_idle();
        }
        Ok(event)
    }

    fn dispatch_idle(&mut self) {
        if self.idle.is_empty() {
            return;
        }
        let now = self.clock_ms;
        for (job, task) in self.scheduler.dispatch(self.idle.len(), now) {
            let machine = self
                .idle
                .pop_first()
                .expect("dispatched more tasks than idle machines");
            self.machines[machine] = Some(Running { job, task });
            self.starts[job][task] = Some(now);
            let j = &self.scheduler.jobs()[job];
            self.heap.push(Reverse(SimEvent {
                time_ms: now + j.task_durations_ms()[task],
                kind: EventKind::TaskFinish {
                    job: j.id().to_string(),
                    task,
                    machine,
                },
            }));
        }
    }

    /// Runs to completion and assembles the result.
    pub fn run(mut self) -> Result<SimResult, SimError> {
        while !self.heap.is_empty() {
            self.step()?;
        }
        self.into_result()
    }

    pub fn into_result(self) -> Result<SimResult, SimError> {
        if self.unfinished > 0 {
            return Err(SimError::Stalled(self.unfinished));
        }
        let sched = &self.scheduler;
        let jobs = sched
            .jobs()
            .iter()
            .enumerate()
            .map(|(i, j)| {
                let st = sched.state(i);
                let task_starts_ms: Vec<u64> = self.starts[i].iter().map(|s| s.unwrap()).collect();
                let task_finishes_ms: Vec<u64> =
                    self.finishes[i].iter().map(|s| s.unwrap()).collect();
                let finish = task_finishes_ms
                    .iter()
                    .copied()
                    .max()
                    .unwrap_or(j.arrival_ms());
                JobRecord {
                    job_id: j.id().to_string(),
                    arrival_ms: j.arrival_ms(),
                    width: crate::domain::job_width(j),
                    stage_sizes: j.stage_sizes(),
                    task_durations_ms: j.task_durations_ms().to_vec(),
                    estimate: st.estimate.clone(),
                    estimate_ready_ms: st.estimate_ready_ms,
                    queue_assigned: st.placements.last().map_or(0, |p| p.queue),
                    placements: st.placements.clone(),
                    pilots: st.pilots.clone(),
                    sampling_ratio: st.sampling_ratio,
                    task_starts_ms,
                    task_finishes_ms,
                    jct_ms: finish - j.arrival_ms(),
                }
            })
            .collect();
        Ok(SimResult {
            policy: sched.policy().name().to_string(),
            config: sched.config().clone(),
            seed: sched.config().seed,
            jobs,
            events: self.log,
        })
    }
}

/// Replays `trace` under `policy`. History-based policies start from an empty store.
pub fn run(trace: &[Job], policy: Policy, cfg: &SchedulerConfig) -> Result<SimResult, SimError> {
    Simulation::new(trace.to_vec(), policy, cfg.clone(), None)?.run()
}

/// Replays `trace` with history-based policies seeded from `history`.
pub fn run_with_history(
    trace: &[Job],
    policy: Policy,
    cfg: &SchedulerConfig,
    history: HistoryStore,
) -> Result<SimResult, SimError> {
    Simulation::new(trace.to_vec(), policy, cfg.clone(), Some(history))?.run()
}
