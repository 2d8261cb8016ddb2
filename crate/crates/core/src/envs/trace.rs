//! Trace ingestion and the k-nearest-neighbour reward simulator.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, RoundData};
use crate::error::{Error, Result};
use crate::kernels::ContextVector;
use crate::similarity::TaskDataset;

pub const STATE_DIM: usize = 5;
/// Handover threshold range in dBm, inclusive.
pub const ACTION_MIN: i32 = -112;
pub const ACTION_MAX: i32 = -84;

const FEATURES: usize = STATE_DIM + 1;

/// Maps record fields to CSV header names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSchema {
    pub bs_id: String,
    pub state: [String; STATE_DIM],
    pub action: String,
    /// Interpreted as a percentage.
    pub reward: String,
}

impl Default for TraceSchema {
    fn default() -> Self {
        Self {
            bs_id: "BS ID".into(),
            state: [
                "# Active users".into(),
                "% CQI".into(),
                "%Small packet SDUs".into(),
                "%Small packet volume".into(),
                "# Users".into(),
            ],
            action: "Threshold handover".into(),
            reward: "%Users throughput>=5Mbps".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub bs_id: String,
    pub state: [f64; STATE_DIM],
    /// Handover threshold in dBm.
    pub action: i32,
    /// Fraction of users at or above the throughput target, in `[0, 1]`.
    pub reward: f64,
}

impl TraceRecord {
    fn features(&self) -> [f64; FEATURES] {
        let mut f = [0.0; FEATURES];
        f[..STATE_DIM].copy_from_slice(&self.state);
        f[STATE_DIM] = self.action as f64;
        f
    }
}

/// Per-column z-score statistics over the five state columns and the action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
}

impl ColumnStats {
    fn from_records(records: &[TraceRecord]) -> Self {
        let n = records.len() as f64;
        let mut mean = [0.0; FEATURES];
        let mut std = [0.0; FEATURES];
        for r in records {
            for (m, v) in mean.iter_mut().zip(r.features()) {
                *m += v / n;
            }
        }
        for r in records {
            for ((s, v), m) in std.iter_mut().zip(r.features()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn normalize(&self, state: &[f64; STATE_DIM], action: i32) -> [f64; FEATURES] {
        let mut f = [0.0; FEATURES];
        for i in 0..STATE_DIM {
            f[i] = (state[i] - self.mean[i]) / self.std[i];
        }
        f[STATE_DIM] = (action as f64 - self.mean[STATE_DIM]) / self.std[STATE_DIM];
        f
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    /// One-based line number in the file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub records: Vec<TraceRecord>,
    pub stats: ColumnStats,
    pub rejected: Vec<RejectedRow>,
}

impl TraceTable {
    /// Base-station ids in order of first appearance.
    pub fn bs_ids(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.bs_id) {
                seen.push(r.bs_id.clone());
            }
        }
        seen
    }
}

pub fn ingest_traces(path: impl AsRef<Path>, schema: &TraceSchema) -> Result<TraceTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema)
}

/// Parses a trace CSV. Rows with missing or malformed fields, or actions
/// outside the threshold range, are skipped and reported.
pub fn ingest_reader<R: Read>(reader: R, schema: &TraceSchema) -> Result<TraceTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Trace("file is empty".into()));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Trace(format!("unknown schema column {name:?}")))
    };
    let bs_col = col(&schema.bs_id)?;
    let state_cols = schema
        .state
        .iter()
        .map(|s| col(s))
        .collect::<Result<Vec<_>>>()?;
    let action_col = col(&schema.action)?;
    let reward_col = col(&schema.reward)?;

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RejectedRow { line, reason: e.to_string() });
                continue;
            }
        };
        match parse_row(&row, bs_col, &state_cols, action_col, reward_col) {
            Ok(r) => records.push(r),
            Err(reason) => {
                log::warn!("trace line {line} rejected: {reason}");
                rejected.push(RejectedRow { line, reason });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Trace(format!(
            "no valid rows ({} rejected)",
            rejected.len()
        )));
    }
    let stats = ColumnStats::from_records(&records);
    Ok(TraceTable {
        records,
        stats,
        rejected,
    })
}

fn parse_row(
    row: &csv::StringRecord,
    bs_col: usize,
    state_cols: &[usize],
    action_col: usize,
    reward_col: usize,
) -> std::result::Result<TraceRecord, String> {
    let field = |c: usize| -> std::result::Result<&str, String> {
        match row.get(c) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(format!("missing field in column {}", c + 1)),
        }
    };
    let num = |c: usize| -> std::result::Result<f64, String> {
        let s = field(c)?;
        let v: f64 = s.parse().map_err(|_| format!("bad number {s:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite value {s:?}"))
        }
    };
    let bs_id = field(bs_col)?.to_string();
    let mut state = [0.0; STATE_DIM];
    for (s, &c) in state.iter_mut().zip(state_cols) {
        *s = num(c)?;
    }
    let action = num(action_col)?;
    if action.fract() != 0.0 {
        return Err(format!("action {action} is not an integer"));
    }
    let action = action as i32;
    if !(ACTION_MIN..=ACTION_MAX).contains(&action) {
        return Err(format!("action {action} outside [{ACTION_MIN}, {ACTION_MAX}]"));
    }
    let reward = num(reward_col)? / 100.0;
    if !(0.0..=1.0).contains(&reward) {
        return Err(format!("reward {} outside [0, 100] percent", reward * 100.0));
    }
    Ok(TraceRecord {
        bs_id,
        state,
        action,
        reward,
    })
}

/// Reward simulator: the mean reward of the `k` records nearest to a
/// normalized `(state, action)` query.
#[derive(Debug, Clone)]
pub struct KnnSimulator {
    points: Vec<[f64; FEATURES]>,
    rewards: Vec<f64>,
    stats: ColumnStats,
    k: usize,
}

impl KnnSimulator {
    pub fn new(table: &TraceTable, k: usize) -> Result<Self> {
        if k == 0 || k > table.records.len() {
            return Err(Error::invalid(
                "k",
                format!("must be in [1, {}]", table.records.len()),
            ));
        }
        Ok(Self {
            points: table
                .records
                .iter()
                .map(|r| table.stats.normalize(&r.state, r.action))
                .collect(),
            rewards: table.records.iter().map(|r| r.reward).collect(),
            stats: table.stats,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn stats(&self) -> &ColumnStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reward(&self, state: &[f64; STATE_DIM], action: i32) -> f64 {
        let q = self.stats.normalize(state, action);
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, order);
        }
        dist[..self.k].iter().map(|&(_, i)| self.rewards[i]).sum::<f64>() / self.k as f64
    }
}

/// Multi-BS bandit over handover thresholds backed by a [`KnnSimulator`].
///
/// Each task is one base station. Its state in round `t` replays that
/// station's trace rows cyclically from a seed-dependent starting row. An
/// arm's context is the normalized state followed by the normalized
/// threshold.
#[derive(Debug, Clone)]
pub struct TraceEnv {
    sim: Arc<KnnSimulator>,
    bs_ids: Vec<String>,
    states: Vec<Vec<[f64; STATE_DIM]>>,
    logged: Vec<Vec<TraceRecord>>,
    offsets: Vec<usize>,
}

impl TraceEnv {
    /// Uses the listed stations, or every station in the table when `None`.
    pub fn new(
        table: &TraceTable,
        sim: Arc<KnnSimulator>,
        bs_ids: Option<&[String]>,
        seed: u64,
    ) -> Result<Self> {
        let ids: Vec<String> = match bs_ids {
            Some(ids) => ids.to_vec(),
            None => table.bs_ids(),
        };
        if ids.is_empty() {
            return Err(Error::Empty("trace environment needs at least one station"));
        }
        let mut by_id: BTreeMap<&str, Vec<TraceRecord>> = BTreeMap::new();
        for r in &table.records {
            by_id.entry(&r.bs_id).or_default().push(r.clone());
        }
        let mut logged = Vec::new();
        for id in &ids {
            let rows = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Trace(format!("station {id:?} not in trace")))?;
            logged.push(rows.clone());
        }
        let states: Vec<Vec<[f64; STATE_DIM]>> = logged
            .iter()
            .map(|rows| rows.iter().map(|r| r.state).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = states.iter().map(|s| rng.random_range(0..s.len())).collect();
        Ok(Self {
            sim,
            bs_ids: ids,
            states,
            logged,
            offsets,
        })
    }

    pub fn bs_ids(&self) -> &[String] {
        &self.bs_ids
    }

    pub fn simulator(&self) -> &KnnSimulator {
        &self.sim
    }

    pub fn actions() -> impl Iterator<Item = i32> {
        ACTION_MIN..=ACTION_MAX
    }

    pub fn state(&self, t: usize, task: usize) -> [f64; STATE_DIM] {
        let s = &self.states[task];
        s[(self.offsets[task] + t) % s.len()]
    }

    fn context(&self, state: &[f64; STATE_DIM], action: i32) -> Result<ContextVector> {
        ContextVector::new(self.sim.stats().normalize(state, action).to_vec())
    }
}

impl Environment for TraceEnv {
    fn num_tasks(&self) -> usize {
        self.bs_ids.len()
    }

    fn num_arms(&self) -> usize {
        (ACTION_MAX - ACTION_MIN + 1) as usize
    }

    fn context_dim(&self) -> usize {
        FEATURES
    }

    fn round(&self, t: usize, task: usize) -> Result<RoundData> {
        if task >= self.num_tasks() {
            return Err(Error::TaskOutOfRange {
                task,
                tasks: self.num_tasks(),
            });
        }
        let state = self.state(t, task);
        let mut contexts = Vec::with_capacity(self.num_arms());
        let mut expected = Vec::with_capacity(self.num_arms());
        for action in Self::actions() {
            contexts.push(self.context(&state, action)?);
            expected.push(self.sim.reward(&state, action));
        }
        Ok(RoundData { contexts, expected })
    }

    /// The station's own logged rows, in file order.
    fn warmup_datasets(&self, per_task: usize, _seed: u64) -> Result<Vec<TaskDataset>> {
        self.logged
            .iter()
            .map(|rows| {
                let points = rows
                    .iter()
                    .take(per_task)
                    .map(|r| Ok((self.context(&r.state, r.action)?, r.reward)))
                    .collect::<Result<Vec<_>>>()?;
                TaskDataset::new(points)
            })
            .collect()
    }
}
