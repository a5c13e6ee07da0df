//! Adaptive choice of the pilot sampling ratio.
//!
//! Each candidate ratio keeps a score: the mean normalized JCT (JCT divided
//! by the job's total task time) of the last `T` finished jobs that used it.
//! The controller warms up on 2%, 3% and 4% for `T` jobs each, explores 1%
//! and/or 5% for `T` jobs if moving away from 3% in that direction helped,
//! and afterwards always picks the best-scoring ratio.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub const RATIO_GRID: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];

const WARMUP: [usize; 3] = [1, 2, 3];
const CENTER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerPhase {
    Warmup,
    Explore,
    Steady,
}

#[derive(Debug, Clone)]
pub struct SamplerState {
    window: usize,
    buffers: [VecDeque<f64>; 5],
    jobs_assigned: usize,
    phase: SamplerPhase,
    explore_plan: Vec<usize>,
    explore_assigned: usize,
}

impl SamplerState {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "sampler window must be positive");
        SamplerState {
            window,
            buffers: Default::default(),
            jobs_assigned: 0,
            phase: SamplerPhase::Warmup,
            explore_plan: Vec::new(),
            explore_assigned: 0,
        }
    }

    pub fn phase(&self) -> SamplerPhase {
        self.phase
    }

    pub fn jobs_assigned(&self) -> usize {
        self.jobs_assigned
    }

    fn slot(ratio: f64) -> Option<usize> {
        RATIO_GRID.iter().position(|&r| (r - ratio).abs() < 1e-12)
    }

    /// Running score of `ratio`, or `None` if no job using it has finished.
    pub fn score(&self, ratio: f64) -> Option<f64> {
        let buf = &self.buffers[Self::slot(ratio)?];
        if buf.is_empty() {
            return None;
        }
        Some(buf.iter().sum::<f64>() / buf.len() as f64)
    }

    fn slot_score(&self, slot: usize) -> Option<f64> {
        self.score(RATIO_GRID[slot])
    }

    fn beats_center(&self, slot: usize) -> bool {
        match (self.slot_score(slot), self.slot_score(CENTER)) {
            (Some(s), Some(c)) => s < c,
            _ => false,
        }
    }

    fn steady_choice(&self) -> usize {
        (0..RATIO_GRID.len())
            .filter_map(|s| self.slot_score(s).map(|v| (s, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map_or(CENTER, |(s, _)| s)
    }

    /// Ratio for the next arriving job; advances the controller.
    pub fn next_ratio(&mut self) -> f64 {
        let t = self.window;
        if self.phase == SamplerPhase::Warmup {
            if self.jobs_assigned < 3 * t {
                let slot = WARMUP[self.jobs_assigned / t];
                self.jobs_assigned += 1;
                return RATIO_GRID[slot];
            }
            // exploration is decided once, on the first job after warmup
            if self.beats_center(1) {
                self.explore_plan.push(0);
            }
            if self.beats_center(3) {
                self.explore_plan.push(4);
            }
            self.phase = if self.explore_plan.is_empty() {
                SamplerPhase::Steady
            } else {
                SamplerPhase::Explore
            };
        }
        if self.phase == SamplerPhase::Explore {
            let slot = self.explore_plan[self.explore_assigned / t];
            self.explore_assigned += 1;
            self.jobs_assigned += 1;
            if self.explore_assigned == self.explore_plan.len() * t {
                self.phase = SamplerPhase::Steady;
            }
            return RATIO_GRID[slot];
        }
        self.jobs_assigned += 1;
        RATIO_GRID[self.steady_choice()]
    }

    /// Records a finished job that used `ratio`. Ratios off the grid are ignored.
    pub fn score_update(&mut self, ratio: f64, jct_ms: f64, total_job_runtime_ms: f64) {
        let Some(slot) = Self::slot(ratio) else {
            return;
        };
        if !(total_job_runtime_ms > 0.0) {
            return;
        }
        let buf = &mut self.buffers[slot];
        buf.push_back(jct_ms / total_job_runtime_ms);
        while buf.len() > self.window {
            buf.pop_front();
        }
    }

    pub fn buffer(&self, ratio: f64) -> Vec<f64> {
        Self::slot(ratio)
            .map(|s| self.buffers[s].iter().copied().collect())
            .unwrap_or_default()
    }
}
