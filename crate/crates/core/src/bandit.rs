//! UCB arm selection and the multi-task bandit runners.
//!
//! All runners are deterministic: given an environment they produce the
//! same [`RoundLog`] sequence on every call. Ties between arms always go
//! to the lowest index.

use std::io::Write;

use serde::Serialize;

use crate::envs::{Environment, RoundData, TaskSubset};
use crate::error::{Error, Result};
use crate::kernels::{ContextVector, KernelSpec};
use crate::krr::{AugmentedContext, ModelState, Prediction, RefreshPolicy, Solver};
use crate::similarity::SimilarityMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    /// Weight of the width term in the UCB.
    pub beta: f64,
    pub lambda: f64,
    pub kx: KernelSpec,
    pub similarity: SimilarityMatrix,
    pub refresh: RefreshPolicy,
    pub solver: Solver,
}

impl PolicyConfig {
    /// `beta = 1`, `lambda = 1` and the default refresh policy.
    pub fn new(kx: KernelSpec, similarity: SimilarityMatrix) -> Self {
        Self {
            beta: 1.0,
            lambda: 1.0,
            kx,
            similarity,
            refresh: RefreshPolicy::default(),
            solver: Solver::default(),
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", "must be finite and ≥ 0"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be positive and finite"));
        }
        self.kx.validate()
    }

    fn model(&self, similarity: SimilarityMatrix) -> Result<ModelState> {
        ModelState::new(self.kx, similarity, self.lambda)?
            .with_refresh(self.refresh)
            .with_solver(self.solver)
    }
}

/// Outcome of one arm selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub arm: usize,
    pub ucb: Vec<f64>,
    pub width: Vec<f64>,
}

/// Audit record of a single decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub time: usize,
    pub task: usize,
    pub arm: usize,
    /// Observed reward.
    pub reward: f64,
    /// Expected reward of the chosen arm.
    pub expected_reward: f64,
    /// Expected reward of the best arm this round.
    pub best_expected: f64,
    pub ucb: Vec<f64>,
    pub width: Vec<f64>,
    /// Elimination stage that made the choice; `None` outside [`run_super`].
    pub stage: Option<usize>,
}

impl RoundLog {
    /// Pseudo-regret of this decision.
    pub fn regret(&self) -> f64 {
        self.best_expected - self.expected_reward
    }

    pub fn width_chosen(&self) -> f64 {
        self.width[self.arm]
    }
}

/// First index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn select_from(predictions: &[Prediction], beta: f64) -> Selection {
    let ucb: Vec<f64> = predictions.iter().map(|p| p.mean + beta * p.width).collect();
    let width = predictions.iter().map(|p| p.width).collect();
    Selection {
        arm: argmax(&ucb),
        ucb,
        width,
    }
}

fn augment(task: usize, contexts: &[ContextVector]) -> Vec<AugmentedContext> {
    contexts
        .iter()
        .map(|c| AugmentedContext::new(task, c.clone()))
        .collect()
}

/// Chooses the arm with the largest `mean + β·width` for `task`.
pub fn select_arm(
    model: &ModelState,
    cfg: &PolicyConfig,
    task: usize,
    contexts: &[ContextVector],
) -> Result<Selection> {
    if contexts.is_empty() {
        return Err(Error::Empty("arm contexts"));
    }
    let preds = model.predict_many(&augment(task, contexts))?;
    Ok(select_from(&preds, cfg.beta))
}

fn annotate<T>(round: usize, task: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Round {
        round,
        task,
        source: Box::new(e),
    })
}

fn check_setup<E: Environment>(env: &E, cfg: &PolicyConfig, horizon: usize) -> Result<()> {
    cfg.validate()?;
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    if cfg.similarity.num_tasks() != env.num_tasks() {
        return Err(Error::DimensionMismatch {
            expected: env.num_tasks(),
            got: cfg.similarity.num_tasks(),
        });
    }
    Ok(())
}

fn log_entry(time: usize, task: usize, rd: &RoundData, sel: Selection, stage: Option<usize>) -> RoundLog {
    RoundLog {
        time,
        task,
        arm: sel.arm,
        reward: rd.reward(sel.arm),
        expected_reward: rd.expected[sel.arm],
        best_expected: rd.best().1,
        ucb: sel.ucb,
        width: sel.width,
        stage,
    }
}

/// Every round, all tasks choose with the round-start model; their
/// observations are then appended together.
///
/// Returns `horizon · M` logs ordered by `(time, task)`.
pub fn run_parallel<E: Environment>(env: &E, cfg: &PolicyConfig, horizon: usize) -> Result<Vec<RoundLog>> {
    check_setup(env, cfg, horizon)?;
    let m = env.num_tasks();
    let mut model = cfg.model(cfg.similarity.clone())?;
    model.reserve(horizon * m);
    let mut logs = Vec::with_capacity(horizon * m);
    for t in 0..horizon {
        let rounds = (0..m)
            .map(|task| annotate(t, task, env.round(t, task)))
            .collect::<Result<Vec<_>>>()?;
        let queries: Vec<AugmentedContext> = rounds
            .iter()
            .enumerate()
            .flat_map(|(task, rd)| augment(task, &rd.contexts))
            .collect();
        let batch = annotate(t, 0, model.predict_batch(queries))?;
        let mut chosen = Vec::with_capacity(m);
        let mut offset = 0;
        for (task, rd) in rounds.iter().enumerate() {
            let n = rd.num_arms();
            if n == 0 {
                return annotate(t, task, Err(Error::Empty("arm contexts")));
            }
            let sel = select_from(&batch.predictions[offset..offset + n], cfg.beta);
            chosen.push((offset + sel.arm, rd.reward(sel.arm)));
            offset += n;
            logs.push(log_entry(t, task, rd, sel, None));
        }
        annotate(t, 0, model.append_chosen(&batch, &chosen))?;
    }
    Ok(logs)
}

/// Runs every task as its own single-task bandit, sharing nothing.
///
/// Logs are merged in `(time, task)` order, matching [`run_parallel`].
pub fn run_independent<E: Environment>(env: &E, cfg: &PolicyConfig, horizon: usize) -> Result<Vec<RoundLog>> {
    let m = env.num_tasks();
    let single = PolicyConfig {
        similarity: SimilarityMatrix::identity(1),
        ..cfg.clone()
    };
    let mut per_task = Vec::with_capacity(m);
    for task in 0..m {
        let sub = TaskSubset::new(env, vec![task])?;
        let mut logs = run_parallel(&sub, &single, horizon).map_err(|e| match e {
            Error::Round { round, source, .. } => Error::Round { round, task, source },
            e => e,
        })?;
        for l in &mut logs {
            l.task = task;
        }
        per_task.push(logs.into_iter());
    }
    let mut merged = Vec::with_capacity(m * horizon);
    for _ in 0..horizon {
        for logs in &mut per_task {
            merged.extend(logs.next());
        }
    }
    Ok(merged)
}

/// Task served at sequential step `t` and the environment round it sees.
///
/// Tasks arrive round-robin; each task's own state sequence advances once
/// per visit, so step `t` shows task `t mod M` its round `t div M`.
pub fn round_robin(t: usize, tasks: usize) -> (usize, usize) {
    (t % tasks, t / tasks)
}

/// One task per step, appending each observation immediately.
pub fn run_sequential<E: Environment>(env: &E, cfg: &PolicyConfig, horizon: usize) -> Result<Vec<RoundLog>> {
    check_setup(env, cfg, horizon)?;
    let m = env.num_tasks();
    let mut model = cfg.model(cfg.similarity.clone())?;
    model.reserve(horizon);
    let mut logs = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let (task, round) = round_robin(t, m);
        let rd = annotate(t, task, env.round(round, task))?;
        let sel = annotate(t, task, select_arm(&model, cfg, task, &rd.contexts))?;
        let x = AugmentedContext::new(task, rd.contexts[sel.arm].clone());
        annotate(t, task, model.append(x, rd.reward(sel.arm)))?;
        logs.push(log_entry(t, task, &rd, sel, None));
    }
    Ok(logs)
}

/// Logs of a staged-elimination run together with the per-stage index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperRun {
    pub logs: Vec<RoundLog>,
    /// `psi[s]` holds the steps whose observations fed stage `s + 1`.
    pub psi: Vec<Vec<usize>>,
}

/// Number of elimination stages for a horizon: `⌈log₂ T⌉`.
pub fn stage_count(horizon: usize) -> usize {
    (usize::BITS - (horizon.max(2) - 1).leading_zeros()) as usize
}

/// Staged elimination over the same round-robin schedule as
/// [`run_sequential`].
///
/// Stage `s` (from 1) keeps its own model trained only on the steps in
/// `psi[s-1]`. At each step the candidate set starts as all arms and, for
/// increasing `s`:
///
/// - if every `β·width ≤ 1/√T`, the best UCB is played and no model grows;
/// - else if every `β·width ≤ 2⁻ˢ`, candidates more than `2¹⁻ˢ` below the
///   best UCB are dropped and the next stage is consulted;
/// - otherwise the first candidate with `β·width > 2⁻ˢ` is played and the
///   step joins `psi[s-1]`.
pub fn run_super<E: Environment>(env: &E, cfg: &PolicyConfig, horizon: usize) -> Result<SuperRun> {
    check_setup(env, cfg, horizon)?;
    if horizon < 2 {
        return Err(Error::invalid("horizon", "staged elimination needs at least 2 steps"));
    }
    let m = env.num_tasks();
    let stages = stage_count(horizon);
    let floor = 1.0 / (horizon as f64).sqrt();
    let mut models = (0..stages)
        .map(|_| cfg.model(cfg.similarity.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut psi = vec![Vec::new(); stages];
    let mut logs = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let (task, round) = round_robin(t, m);
        let rd = annotate(t, task, env.round(round, task))?;
        let n = rd.num_arms();
        let mut ucb = vec![f64::NEG_INFINITY; n];
        let mut width = vec![f64::NAN; n];
        let mut candidates: Vec<usize> = (0..n).collect();
        let mut s = 1;
        let mut iterations = 0;
        let (arm, stage, grow) = loop {
            iterations += 1;
            if iterations > stages + 1 || s > stages {
                return Err(Error::NonTermination { round: t, iterations });
            }
            let ctx: Vec<ContextVector> = candidates.iter().map(|&a| rd.contexts[a].clone()).collect();
            let preds = annotate(t, task, models[s - 1].predict_many(&augment(task, &ctx)))?;
            for (&a, p) in candidates.iter().zip(&preds) {
                ucb[a] = p.mean + cfg.beta * p.width;
                width[a] = p.width;
            }
            let omega: Vec<f64> = preds.iter().map(|p| cfg.beta * p.width).collect();
            let cand_ucb: Vec<f64> = candidates.iter().map(|&a| ucb[a]).collect();
            let threshold = 0.5f64.powi(s as i32);
            if omega.iter().all(|&w| w <= floor) {
                break (candidates[argmax(&cand_ucb)], s, false);
            } else if omega.iter().all(|&w| w <= threshold) {
                let top = cand_ucb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                candidates.retain(|&a| ucb[a] >= top - 2.0 * threshold);
                s += 1;
            } else {
                let i = omega.iter().position(|&w| w > threshold).expect("some width exceeds threshold");
                break (candidates[i], s, true);
            }
        };
        if grow {
            let x = AugmentedContext::new(task, rd.contexts[arm].clone());
            annotate(t, task, models[stage - 1].append(x, rd.reward(arm)))?;
            psi[stage - 1].push(t);
        }
        let sel = Selection { arm, ucb, width };
        logs.push(log_entry(t, task, &rd, sel, Some(stage)));
    }
    Ok(SuperRun { logs, psi })
}

/// Prefix sums of `oracle[i] − expected_reward[i]`.
pub fn cumulative_regret(logs: &[RoundLog], oracle: &[f64]) -> Result<Vec<f64>> {
    if logs.len() != oracle.len() {
        return Err(Error::LengthMismatch {
            left: logs.len(),
            right: oracle.len(),
        });
    }
    let mut total = 0.0;
    Ok(logs
        .iter()
        .zip(oracle)
        .map(|(l, o)| {
            total += o - l.expected_reward;
            total
        })
        .collect())
}

/// Cumulative pseudo-regret summed over tasks, one value per time step.
pub fn regret_curve(logs: &[RoundLog]) -> Vec<f64> {
    let horizon = logs.iter().map(|l| l.time + 1).max().unwrap_or(0);
    let mut per_step = vec![0.0; horizon];
    for l in logs {
        per_step[l.time] += l.regret();
    }
    let mut total = 0.0;
    per_step
        .into_iter()
        .map(|r| {
            total += r;
            total
        })
        .collect()
}

#[derive(Serialize)]
struct LogRow {
    time: usize,
    task: usize,
    arm: usize,
    reward: f64,
    regret: f64,
    width_chosen: f64,
}

/// Writes `time,task,arm,reward,regret,width_chosen` rows with a header.
pub fn write_round_logs<W: Write>(writer: W, logs: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for l in logs {
        w.serialize(LogRow {
            time: l.time,
            task: l.task,
            arm: l.arm,
            reward: l.reward,
            regret: l.regret(),
            width_chosen: l.width_chosen(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
