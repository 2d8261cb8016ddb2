use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use super::config::{DataSource, ExperimentConfig, Schedule, SimilarityMethod};
use crate::bandit::{regret_curve, run_independent, run_parallel, run_sequential, PolicyConfig, RoundLog};
use crate::envs::{ingest_traces, Environment, KnnSimulator, SyntheticBanditEnv, TraceEnv, TraceTable};
use crate::error::{Error, Result};
use crate::kernels::{median_heuristic, KernelSpec};
use crate::similarity::{cke_similarity, r2_similarity, SimilarityMatrix, TaskDataset};

/// One policy run for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub similarity: SimilarityMatrix,
    pub logs: Vec<RoundLog>,
    /// Cumulative pseudo-regret summed over tasks, per time step.
    pub curve: Vec<f64>,
}

impl SeedRun {
    pub fn final_regret(&self) -> f64 {
        self.curve.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: SimilarityMethod,
    /// Sorted by seed.
    pub runs: Vec<SeedRun>,
    pub mean_curve: Vec<f64>,
}

impl MethodResult {
    pub fn mean_final_regret(&self) -> f64 {
        self.mean_curve.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditReport {
    pub methods: Vec<MethodResult>,
}

impl BanditReport {
    pub fn method(&self, m: SimilarityMethod) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// Pointwise mean of equally long curves.
pub fn mean_curve(curves: &[&[f64]]) -> Vec<f64> {
    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}

/// A bandit environment built from the config for a given seed.
pub enum ExperimentEnv {
    Synthetic(SyntheticBanditEnv),
    Trace(TraceEnv),
}

impl Environment for ExperimentEnv {
    fn num_tasks(&self) -> usize {
        match self {
            Self::Synthetic(e) => e.num_tasks(),
            Self::Trace(e) => e.num_tasks(),
        }
    }
    fn num_arms(&self) -> usize {
        match self {
            Self::Synthetic(e) => e.num_arms(),
            Self::Trace(e) => e.num_arms(),
        }
    }
    fn context_dim(&self) -> usize {
        match self {
            Self::Synthetic(e) => e.context_dim(),
            Self::Trace(e) => e.context_dim(),
        }
    }
    fn round(&self, t: usize, task: usize) -> Result<crate::envs::RoundData> {
        match self {
            Self::Synthetic(e) => e.round(t, task),
            Self::Trace(e) => e.round(t, task),
        }
    }
    fn warmup_datasets(&self, per_task: usize, seed: u64) -> Result<Vec<TaskDataset>> {
        match self {
            Self::Synthetic(e) => e.warmup_datasets(per_task, seed),
            Self::Trace(e) => e.warmup_datasets(per_task, seed),
        }
    }
}

/// Loads the trace and its simulator once; environments for each seed
/// share them.
pub struct EnvFactory {
    source: DataSource,
    trace: Option<(TraceTable, Arc<KnnSimulator>, Vec<String>)>,
}

impl EnvFactory {
    pub fn new(cfg: &ExperimentConfig, source: DataSource) -> Result<Self> {
        let trace = match source {
            DataSource::Synthetic => None,
            DataSource::Trace => {
                let path = cfg
                    .trace
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("trace.path is required".into()))?;
                let table = ingest_traces(path, &cfg.trace.schema)?;
                if !table.rejected.is_empty() {
                    log::warn!("skipped {} malformed trace rows", table.rejected.len());
                }
                let sim = Arc::new(KnnSimulator::new(&table, cfg.trace.k)?);
                let ids = match &cfg.trace.bs_ids {
                    Some(ids) => ids.clone(),
                    None => table.bs_ids().into_iter().take(cfg.trace.max_tasks).collect(),
                };
                Some((table, sim, ids))
            }
        };
        Ok(Self { source, trace })
    }

    pub fn build(&self, seed: u64) -> Result<ExperimentEnv> {
        match (&self.source, &self.trace) {
            (DataSource::Trace, Some((table, sim, ids))) => Ok(ExperimentEnv::Trace(TraceEnv::new(
                table,
                Arc::clone(sim),
                Some(ids),
                seed,
            )?)),
            _ => Ok(ExperimentEnv::Synthetic(SyntheticBanditEnv::new(seed))),
        }
    }
}

/// Kernels derived from one seed's warmup data.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupKernels {
    pub datasets: Vec<TaskDataset>,
    pub kx: KernelSpec,
    pub ky: KernelSpec,
}

pub fn warmup_kernels<E: Environment>(env: &E, cfg: &ExperimentConfig, seed: u64) -> Result<WarmupKernels> {
    let datasets = env.warmup_datasets(cfg.similarity.warmup, seed)?;
    let ls = match cfg.policy.lengthscale {
        Some(l) => l,
        None => {
            let xs: Vec<&[f64]> = datasets.iter().flat_map(|d| d.xs()).collect();
            median_heuristic(&xs)?
        }
    };
    let ry = match cfg.similarity.reward_lengthscale {
        Some(l) => l,
        None => {
            let ys: Vec<[f64; 1]> = datasets.iter().flat_map(|d| d.ys()).map(|y| [y]).collect();
            median_heuristic(&ys)?
        }
    };
    Ok(WarmupKernels {
        datasets,
        kx: KernelSpec::gaussian(ls, cfg.policy.output_scale)?,
        ky: KernelSpec::gaussian(ry, 1.0)?,
    })
}

/// Similarity matrix for `method` from warmup data.
pub fn estimate_similarity(
    method: SimilarityMethod,
    warm: &WarmupKernels,
    cfg: &ExperimentConfig,
) -> Result<SimilarityMatrix> {
    let m = warm.datasets.len();
    let sim = match method {
        SimilarityMethod::Identity => SimilarityMatrix::identity(m),
        SimilarityMethod::Cke => cke_similarity(&warm.datasets, &warm.kx, &warm.ky, cfg.similarity.regularizer)?,
        SimilarityMethod::R2 => r2_similarity(
            &warm.datasets,
            &warm.kx,
            cfg.similarity.r2_lambda,
            cfg.similarity.r2_floor,
        )?,
        SimilarityMethod::File => {
            let path = cfg
                .similarity
                .file
                .as_ref()
                .ok_or_else(|| Error::Config("similarity.file is required".into()))?;
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            SimilarityMatrix::read_csv(file)?
        }
    };
    if sim.num_tasks() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: sim.num_tasks(),
        });
    }
    Ok(sim)
}

fn run_seed(factory: &EnvFactory, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SeedRun>> {
    let env = factory.build(seed)?;
    let warm = warmup_kernels(&env, cfg, seed)?;
    let mut out = Vec::with_capacity(cfg.similarity.methods.len());
    for &method in &cfg.similarity.methods {
        let similarity = estimate_similarity(method, &warm, cfg)?;
        let policy = PolicyConfig {
            beta: cfg.policy.beta,
            lambda: cfg.policy.lambda,
            kx: warm.kx,
            similarity: similarity.clone(),
            refresh: cfg.policy.refresh(),
            solver: cfg.policy.solver,
        };
        let logs = match (cfg.schedule, method) {
            (Schedule::Parallel, SimilarityMethod::Identity) => run_independent(&env, &policy, cfg.horizon)?,
            (Schedule::Parallel, _) => run_parallel(&env, &policy, cfg.horizon)?,
            (Schedule::Sequential, _) => run_sequential(&env, &policy, cfg.horizon * env.num_tasks())?,
        };
        let curve = regret_curve(&logs);
        out.push(SeedRun {
            seed,
            similarity,
            logs,
            curve,
        });
    }
    Ok(out)
}

fn worker_count(jobs: usize) -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs)
        .max(1)
}

/// Runs every configured similarity method on every seed.
///
/// Seeds are spread over worker threads; each worker owns its environment
/// and models, and results are ordered by seed, so the report does not
/// depend on scheduling.
pub fn run_bandit_experiment(cfg: &ExperimentConfig, source: DataSource) -> Result<BanditReport> {
    cfg.validate()?;
    let factory = EnvFactory::new(cfg, source)?;
    let seeds = &cfg.seeds;
    let workers = worker_count(seeds.len());
    let mut results: BTreeMap<usize, Result<Vec<SeedRun>>> = BTreeMap::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let factory = &factory;
                scope.spawn(move || {
                    (w..seeds.len())
                        .step_by(workers)
                        .map(|i| {
                            let seed = seeds[i];
                            let r = run_seed(factory, cfg, seed).map_err(|e| Error::Seed {
                                seed,
                                source: Box::new(e),
                            });
                            (i, r)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            results.extend(h.join().expect("seed worker panicked"));
        }
    });
    let mut per_seed = Vec::with_capacity(seeds.len());
    for (_, r) in results {
        per_seed.push(r?);
    }
    per_seed.sort_by_key(|runs| runs[0].seed);
    let methods = cfg
        .similarity
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let runs: Vec<SeedRun> = per_seed.iter().map(|r| r[k].clone()).collect();
            let curves: Vec<&[f64]> = runs.iter().map(|r| r.curve.as_slice()).collect();
            MethodResult {
                method,
                mean_curve: mean_curve(&curves),
                runs,
            }
        })
        .collect();
    Ok(BanditReport { methods })
}

/// Similarity matrices estimated for each seed and non-identity method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityEstimate {
    pub seed: u64,
    pub method: SimilarityMethod,
    #[serde(skip)]
    pub matrix: SimilarityMatrix,
}

pub fn run_similarity(cfg: &ExperimentConfig) -> Result<Vec<SimilarityEstimate>> {
    cfg.validate()?;
    let factory = EnvFactory::new(cfg, cfg.similarity.source)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let env = factory.build(seed)?;
        let warm = warmup_kernels(&env, cfg, seed).map_err(|e| Error::Seed {
            seed,
            source: Box::new(e),
        })?;
        for &method in &cfg.similarity.methods {
            if matches!(method, SimilarityMethod::Identity | SimilarityMethod::File) {
                continue;
            }
            let matrix = estimate_similarity(method, &warm, cfg).map_err(|e| Error::Seed {
                seed,
                source: Box::new(e),
            })?;
            out.push(SimilarityEstimate { seed, method, matrix });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::SYNTHETIC_TASKS;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            horizon: 25,
            seeds: vec![4, 1, 2],
            similarity: crate::harness::SimilarityParams {
                warmup: 30,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn aggregate_is_mean_of_seeds() {
        let report = run_bandit_experiment(&small(), DataSource::Synthetic).unwrap();
        assert_eq!(report.methods.len(), 3);
        for m in &report.methods {
            assert_eq!(m.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2, 4]);
            for (t, &v) in m.mean_curve.iter().enumerate() {
                let want = m.runs.iter().map(|r| r.curve[t]).sum::<f64>() / 3.0;
                assert!((v - want).abs() < 1e-12);
            }
            for r in &m.runs {
                assert_eq!(r.logs.len(), 25 * SYNTHETIC_TASKS);
                assert!(r.curve.windows(2).all(|w| w[1] >= w[0]));
            }
        }
    }

    #[test]
    fn identity_matches_plain_independent_runs() {
        let mut cfg = small();
        cfg.similarity.methods = vec![SimilarityMethod::Identity];
        let report = run_bandit_experiment(&cfg, DataSource::Synthetic).unwrap();
        let run = &report.methods[0].runs[0];
        let env = SyntheticBanditEnv::new(1);
        let warm = warmup_kernels(&env, &cfg, 1).unwrap();
        let policy = PolicyConfig::new(warm.kx, SimilarityMatrix::identity(SYNTHETIC_TASKS))
            .with_beta(cfg.policy.beta)
            .with_solver(cfg.policy.solver);
        let direct = run_independent(&env, &policy, cfg.horizon).unwrap();
        assert_eq!(run.logs, direct);
    }

    #[test]
    fn sequential_schedule_covers_all_tasks() {
        let mut cfg = small();
        cfg.schedule = Schedule::Sequential;
        cfg.seeds = vec![0];
        cfg.similarity.methods = vec![SimilarityMethod::Cke];
        let report = run_bandit_experiment(&cfg, DataSource::Synthetic).unwrap();
        assert_eq!(report.methods[0].mean_curve.len(), 25 * SYNTHETIC_TASKS);
    }

    #[test]
    fn estimates_are_valid_similarities() {
        let cfg = small();
        let est = run_similarity(&cfg).unwrap();
        assert_eq!(est.len(), 6);
        for e in &est {
            assert_eq!(e.matrix.num_tasks(), SYNTHETIC_TASKS);
            assert!(e.matrix.min_eigenvalue() > -1e-9);
        }
    }

    #[test]
    fn file_method_size_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        SimilarityMatrix::identity(2)
            .write_csv(std::fs::File::create(&path).unwrap())
            .unwrap();
        let mut cfg = small();
        cfg.similarity.methods = vec![SimilarityMethod::File];
        cfg.similarity.file = Some(path);
        let err = run_bandit_experiment(&cfg, DataSource::Synthetic).unwrap_err();
        assert!(matches!(err, Error::Seed { .. }));
    }

    #[test]
    fn mean_of_curves() {
        assert_eq!(mean_curve(&[&[1.0, 2.0], &[3.0, 6.0]]), vec![2.0, 4.0]);
    }
}
