//! Evaluation environments.
//!
//! Every environment is immutable after construction and answers
//! [`Environment::round`] as a pure function of `(round, task)`, so runs are
//! reproducible and independent of query order.

mod gp;
mod synthetic;
mod trace;

pub use gp::{generate_gp_tasks, GpRegressionConfig, GpSampler, GpTaskSplit};
pub use synthetic::{SyntheticBanditEnv, SYNTHETIC_ARMS, SYNTHETIC_TASKS};
pub use trace::{
    ingest_reader, ingest_traces, ColumnStats, KnnSimulator, RejectedRow, TraceEnv, TraceRecord,
    TraceSchema, TraceTable, ACTION_MAX, ACTION_MIN, STATE_DIM,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::ContextVector;
use crate::similarity::TaskDataset;

/// Round index offset used for exploration data gathered before a run.
pub const WARMUP_ROUND_BASE: usize = 1 << 40;

/// What the environment reveals for one task in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundData {
    pub contexts: Vec<ContextVector>,
    /// Expected reward of each arm given its context.
    pub expected: Vec<f64>,
}

impl RoundData {
    pub fn num_arms(&self) -> usize {
        self.contexts.len()
    }

    /// Best expected reward and the first arm attaining it.
    pub fn best(&self) -> (usize, f64) {
        let mut best = (0, self.expected[0]);
        for (a, &r) in self.expected.iter().enumerate().skip(1) {
            if r > best.1 {
                best = (a, r);
            }
        }
        best
    }

    /// Observed reward for pulling `arm`.
    pub fn reward(&self, arm: usize) -> f64 {
        self.expected[arm]
    }
}

pub trait Environment {
    fn num_tasks(&self) -> usize;

    fn num_arms(&self) -> usize;

    fn context_dim(&self) -> usize;

    fn round(&self, t: usize, task: usize) -> Result<RoundData>;

    /// Per-task `(context, reward)` samples available before a run, used to
    /// estimate task similarity. The default plays uniformly random arms on
    /// rounds disjoint from any run.
    fn warmup_datasets(&self, per_task: usize, seed: u64) -> Result<Vec<TaskDataset>> {
        (0..self.num_tasks())
            .map(|m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(m as u64 + 1);
                let mut points = Vec::with_capacity(per_task);
                for i in 0..per_task {
                    let rd = self.round(WARMUP_ROUND_BASE + i, m)?;
                    let arm = rng.random_range(0..rd.num_arms());
                    points.push((rd.contexts[arm].clone(), rd.reward(arm)));
                }
                TaskDataset::new(points)
            })
            .collect()
    }
}

impl<E: Environment + ?Sized> Environment for &E {
    fn num_tasks(&self) -> usize {
        (**self).num_tasks()
    }
    fn num_arms(&self) -> usize {
        (**self).num_arms()
    }
    fn context_dim(&self) -> usize {
        (**self).context_dim()
    }
    fn round(&self, t: usize, task: usize) -> Result<RoundData> {
        (**self).round(t, task)
    }
    fn warmup_datasets(&self, per_task: usize, seed: u64) -> Result<Vec<TaskDataset>> {
        (**self).warmup_datasets(per_task, seed)
    }
}

/// View of a subset of another environment's tasks, renumbered from zero.
#[derive(Debug, Clone)]
pub struct TaskSubset<E> {
    inner: E,
    tasks: Vec<usize>,
}

impl<E: Environment> TaskSubset<E> {
    pub fn new(inner: E, tasks: Vec<usize>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Empty("task subset"));
        }
        if let Some(&t) = tasks.iter().find(|&&t| t >= inner.num_tasks()) {
            return Err(Error::TaskOutOfRange {
                task: t,
                tasks: inner.num_tasks(),
            });
        }
        Ok(Self { inner, tasks })
    }
}

impl<E: Environment> Environment for TaskSubset<E> {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
    fn num_arms(&self) -> usize {
        self.inner.num_arms()
    }
    fn context_dim(&self) -> usize {
        self.inner.context_dim()
    }
    fn round(&self, t: usize, task: usize) -> Result<RoundData> {
        let inner = *self.tasks.get(task).ok_or(Error::TaskOutOfRange {
            task,
            tasks: self.tasks.len(),
        })?;
        self.inner.round(t, inner)
    }
    fn warmup_datasets(&self, per_task: usize, seed: u64) -> Result<Vec<TaskDataset>> {
        let all = self.inner.warmup_datasets(per_task, seed)?;
        Ok(self.tasks.iter().map(|&t| all[t].clone()).collect())
    }
}
