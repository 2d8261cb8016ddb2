use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{GpRegressionConfig, TraceSchema};
use crate::error::{Error, Result};
use crate::krr::{RefreshPolicy, Solver};
use crate::similarity::Regularizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SimSweep,
    SyntheticBandit,
    TraceBandit,
    TheoryChecks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMethod {
    Identity,
    Cke,
    R2,
    File,
}

impl SimilarityMethod {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityMethod::Identity => "identity",
            SimilarityMethod::Cke => "cke",
            SimilarityMethod::R2 => "r2",
            SimilarityMethod::File => "file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// All tasks act every round.
    #[default]
    Parallel,
    /// One task per step, round-robin, `horizon · M` steps in total.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub beta: f64,
    pub lambda: f64,
    /// Gaussian context-kernel lengthscale; the median heuristic over the
    /// warmup contexts when absent.
    pub lengthscale: Option<f64>,
    pub output_scale: f64,
    /// Appends between inverse checks; 0 disables them.
    pub refresh_every: usize,
    pub solver: Solver,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            beta: 0.3,
            lambda: 1.0,
            lengthscale: None,
            output_scale: 1.0,
            refresh_every: 512,
            solver: Solver::Cholesky,
        }
    }
}

impl PolicyParams {
    pub fn refresh(&self) -> RefreshPolicy {
        RefreshPolicy {
            every: (self.refresh_every > 0).then_some(self.refresh_every),
            always: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityParams {
    pub methods: Vec<SimilarityMethod>,
    /// Exploration samples per task used to estimate similarity.
    pub warmup: usize,
    pub regularizer: Regularizer,
    /// Reward-kernel lengthscale for the embedding distance; median
    /// heuristic over warmup rewards when absent.
    pub reward_lengthscale: Option<f64>,
    /// Ridge parameter of the cross-task R² fits.
    pub r2_lambda: f64,
    /// Averaged R² below this becomes 0.
    pub r2_floor: f64,
    /// Cached matrix for the `file` method.
    pub file: Option<PathBuf>,
    /// Dataset used by the `similarity` command.
    pub source: DataSource,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self {
            methods: vec![SimilarityMethod::Identity, SimilarityMethod::Cke, SimilarityMethod::R2],
            warmup: 100,
            regularizer: Regularizer::default(),
            reward_lengthscale: None,
            r2_lambda: 0.1,
            r2_floor: -0.5,
            file: None,
            source: DataSource::Synthetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub gp: GpRegressionConfig,
    /// Independent target draws.
    pub draws: usize,
    /// Grid spacing of `sim_train` over `[0, 1]`.
    pub step: f64,
    /// Ridge parameter; the generator's noise variance when absent.
    pub lambda: Option<f64>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            gp: GpRegressionConfig::default(),
            draws: 100,
            step: 0.01,
            lambda: None,
        }
    }
}

impl SweepParams {
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(self.gp.noise_var)
    }

    pub fn grid(&self) -> Vec<f64> {
        let steps = (1.0 / self.step).round() as usize;
        (0..=steps).map(|i| i as f64 / steps as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceParams {
    pub path: Option<PathBuf>,
    pub schema: TraceSchema,
    /// Neighbours averaged by the reward simulator.
    pub k: usize,
    /// Stations to use; the first `max_tasks` in the file when absent.
    pub bs_ids: Option<Vec<String>>,
    pub max_tasks: usize,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            path: None,
            schema: TraceSchema::default(),
            k: 5,
            bs_ids: None,
            max_tasks: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryParams {
    /// Random instances for the rank bound.
    pub instances: usize,
    pub tasks: usize,
    /// Number of contexts is `horizon + 1`.
    pub horizon: usize,
    pub context_dim: usize,
    pub lambda: f64,
    /// Context sets for the monotonicity check.
    pub mu_sets: usize,
    pub mu_step: f64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        Self {
            instances: 50,
            tasks: 3,
            horizon: 20,
            context_dim: 3,
            lambda: 1.0,
            mu_sets: 20,
            mu_step: 0.1,
        }
    }
}

impl TheoryParams {
    pub fn mu_grid(&self) -> Vec<f64> {
        let steps = (1.0 / self.mu_step).round() as usize;
        (0..=steps).map(|i| i as f64 / steps as f64).collect()
    }
}

/// Everything an experiment needs. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub schedule: Schedule,
    pub policy: PolicyParams,
    pub similarity: SimilarityParams,
    pub sweep: SweepParams,
    pub trace: TraceParams,
    pub theory: TheoryParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            horizon: 1000,
            seeds: (0..10).collect(),
            out_dir: None,
            schedule: Schedule::Parallel,
            policy: PolicyParams::default(),
            similarity: SimilarityParams::default(),
            sweep: SweepParams::default(),
            trace: TraceParams::default(),
            theory: TheoryParams::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    /// Parses a config written as JSON, or the `config` field of a run
    /// manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(config_err)?;
        let inner = match value.get("config") {
            Some(c) if value.get("version").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(config_err)
    }

    /// Reads a `.json` file as JSON and anything else as TOML. Relative data
    /// paths are taken relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        let base = path
            .parent()
            .and_then(|p| std::fs::canonicalize(if p.as_os_str().is_empty() { Path::new(".") } else { p }).ok());
        Ok(match base {
            Some(base) => cfg.resolve_paths(&base),
            None => cfg,
        })
    }

    /// Makes relative data paths relative to `base`.
    pub fn resolve_paths(mut self, base: &Path) -> Self {
        for p in [&mut self.trace.path, &mut self.similarity.file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        let p = &self.policy;
        if !(p.beta >= 0.0 && p.beta.is_finite()) {
            return bad("policy.beta must be finite and ≥ 0");
        }
        if !(p.lambda > 0.0 && p.lambda.is_finite()) {
            return bad("policy.lambda must be positive");
        }
        if p.lengthscale.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return bad("policy.lengthscale must be positive");
        }
        if !(p.output_scale > 0.0 && p.output_scale.is_finite()) {
            return bad("policy.output_scale must be positive");
        }
        let s = &self.similarity;
        if s.methods.is_empty() {
            return bad("similarity.methods must not be empty");
        }
        if s.warmup < 2 {
            return bad("similarity.warmup must be at least 2");
        }
        s.regularizer.validate().map_err(config_err)?;
        if s.reward_lengthscale.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return bad("similarity.reward_lengthscale must be positive");
        }
        if !(s.r2_lambda > 0.0 && s.r2_lambda.is_finite()) {
            return bad("similarity.r2_lambda must be positive");
        }
        if !(s.r2_floor <= 0.0 && s.r2_floor.is_finite()) {
            return bad("similarity.r2_floor must be finite and ≤ 0");
        }
        if s.methods.contains(&SimilarityMethod::File) && s.file.is_none() {
            return bad("similarity method `file` needs similarity.file");
        }
        let w = &self.sweep;
        w.gp.validate().map_err(config_err)?;
        if w.draws == 0 {
            return bad("sweep.draws must be at least 1");
        }
        if !(w.step > 0.0 && w.step <= 1.0) || ((1.0 / w.step) - (1.0 / w.step).round()).abs() > 1e-9 {
            return bad("sweep.step must divide 1 evenly");
        }
        if !(w.lambda() > 0.0) {
            return bad("sweep.lambda (or gp.noise_var) must be positive");
        }
        if self.trace.k == 0 || self.trace.max_tasks == 0 {
            return bad("trace.k and trace.max_tasks must be positive");
        }
        let t = &self.theory;
        if t.tasks == 0 || t.horizon == 0 || t.context_dim == 0 {
            return bad("theory.tasks, theory.horizon and theory.context_dim must be positive");
        }
        if !(t.lambda > 0.0) {
            return bad("theory.lambda must be positive");
        }
        if !(t.mu_step > 0.0 && t.mu_step <= 1.0) || ((1.0 / t.mu_step) - (1.0 / t.mu_step).round()).abs() > 1e-9 {
            return bad("theory.mu_step must divide 1 evenly");
        }
        Ok(())
    }

    /// Checks that the config suits `kind` and fills in `kind` if absent.
    pub fn for_kind(mut self, kind: ExperimentKind) -> Result<Self> {
        match self.kind {
            Some(k) if k != kind => {
                return Err(Error::Config(format!(
                    "config is for {k:?} but {kind:?} was requested"
                )))
            }
            _ => self.kind = Some(kind),
        }
        if kind == ExperimentKind::TraceBandit && self.trace.path.is_none() {
            return Err(Error::Config("trace.path is required".into()));
        }
        self.validate()?;
        Ok(self)
    }
}
