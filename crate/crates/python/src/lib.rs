//! Python bindings for `mtbandit`.
//!
//! Contexts are plain lists of floats and matrices are lists of rows.
//! Library errors surface as `ValueError` for bad input and `RuntimeError`
//! for numerical failures.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mtbandit::bandit::{self, PolicyConfig, RoundLog};
use mtbandit::envs::{Environment, SyntheticBanditEnv};
use mtbandit::harness;
use mtbandit::kernels;
use mtbandit::similarity::{self, Regularizer};
use mtbandit::{AugmentedContext, ContextVector, Error, KernelSpec, ModelState, SimilarityMatrix, Solver, TaskDataset};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::DimensionMismatch { .. }
        | Error::NonFinite(_)
        | Error::InvalidParameter { .. }
        | Error::Empty(_)
        | Error::TaskOutOfRange { .. }
        | Error::ZeroVariance { .. }
        | Error::NotPsd { .. }
        | Error::LengthMismatch { .. }
        | Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn context(x: Vec<f64>) -> PyResult<ContextVector> {
    ContextVector::new(x).map_err(to_py)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn datasets(data: Vec<(Vec<Vec<f64>>, Vec<f64>)>) -> PyResult<Vec<TaskDataset>> {
    data.into_iter()
        .map(|(xs, ys)| TaskDataset::from_pairs(xs, ys).map_err(to_py))
        .collect()
}

fn history(points: Vec<(usize, Vec<f64>)>) -> PyResult<Vec<AugmentedContext>> {
    points
        .into_iter()
        .map(|(task, x)| Ok(AugmentedContext::new(task, context(x)?)))
        .collect()
}

fn solver(name: &str) -> PyResult<Solver> {
    match name {
        "cholesky" => Ok(Solver::Cholesky),
        "block-inverse" => Ok(Solver::BlockInverse),
        _ => Err(PyValueError::new_err(format!(
            "unknown solver {name:?}; expected \"cholesky\" or \"block-inverse\""
        ))),
    }
}

/// Context kernel: Gaussian or linear.
#[pyclass(name = "Kernel", frozen, from_py_object)]
#[derive(Clone)]
struct PyKernel {
    inner: KernelSpec,
}

#[pymethods]
impl PyKernel {
    #[staticmethod]
    #[pyo3(signature = (lengthscale, output_scale = 1.0))]
    fn gaussian(lengthscale: f64, output_scale: f64) -> PyResult<Self> {
        Ok(Self {
            inner: KernelSpec::gaussian(lengthscale, output_scale).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn linear() -> Self {
        Self {
            inner: KernelSpec::linear(),
        }
    }

    fn eval(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        kernels::eval_kernel(&self.inner, &x, &y).map_err(to_py)
    }

    fn gram(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&kernels::gram(&self.inner, &xs).map_err(to_py)?.entries))
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Symmetric PSD task-similarity matrix with unit diagonal.
#[pyclass(name = "Similarity", frozen, from_py_object)]
#[derive(Clone)]
struct PySimilarity {
    inner: SimilarityMatrix,
}

#[pymethods]
impl PySimilarity {
    #[new]
    fn new(entries: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = entries.len();
        if entries.iter().any(|r| r.len() != m) {
            return Err(PyValueError::new_err("similarity matrix must be square"));
        }
        let mat = DMatrix::from_fn(m, m, |i, j| entries[i][j]);
        Ok(Self {
            inner: SimilarityMatrix::new(mat).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn identity(m: usize) -> Self {
        Self {
            inner: SimilarityMatrix::identity(m),
        }
    }

    #[staticmethod]
    fn uniform(m: usize, mu: f64) -> PyResult<Self> {
        Ok(Self {
            inner: SimilarityMatrix::uniform(m, mu).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.num_tasks()
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        rows(self.inner.entries())
    }
}

/// Multi-task kernel ridge regression with incremental updates.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kernel, similarity, lam = 1.0, solver = "block-inverse"))]
    fn new(kernel: PyKernel, similarity: PySimilarity, lam: f64, solver: &str) -> PyResult<Self> {
        let solver = self::solver(solver)?;
        let inner = ModelState::new(kernel.inner, similarity.inner, lam)
            .and_then(|m| m.with_solver(solver))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    fn append(&mut self, task: usize, x: Vec<f64>, reward: f64) -> PyResult<()> {
        self.inner
            .append(AugmentedContext::new(task, context(x)?), reward)
            .map_err(to_py)
    }

    /// Returns `(mean, width)`.
    fn predict(&self, task: usize, x: Vec<f64>) -> PyResult<(f64, f64)> {
        let p = self
            .inner
            .predict(&AugmentedContext::new(task, context(x)?))
            .map_err(to_py)?;
        Ok((p.mean, p.width))
    }

    /// `(K̃ + λI)⁻¹` for the current history.
    fn inverse(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.inverse())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Five-task, five-arm synthetic environment.
#[pyclass(name = "SyntheticEnv", frozen)]
struct PySyntheticEnv {
    inner: SyntheticBanditEnv,
}

#[pymethods]
impl PySyntheticEnv {
    #[new]
    fn new(seed: u64) -> Self {
        Self {
            inner: SyntheticBanditEnv::new(seed),
        }
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.num_tasks()
    }

    #[getter]
    fn num_arms(&self) -> usize {
        self.inner.num_arms()
    }

    /// Returns `(contexts, expected_rewards)` for one task and round.
    fn round(&self, t: usize, task: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let rd = self.inner.round(t, task).map_err(to_py)?;
        let xs = rd.contexts.iter().map(|c| c.as_slice().to_vec()).collect();
        Ok((xs, rd.expected))
    }

    /// Per-task `(xs, ys)` exploration samples.
    fn warmup(&self, per_task: usize, seed: u64) -> PyResult<Vec<(Vec<Vec<f64>>, Vec<f64>)>> {
        let data = self.inner.warmup_datasets(per_task, seed).map_err(to_py)?;
        Ok(data
            .iter()
            .map(|d| (d.xs().iter().map(|x| x.to_vec()).collect(), d.ys()))
            .collect())
    }
}

/// One decision of a bandit run.
#[pyclass(name = "RoundLog", frozen, get_all)]
struct PyRoundLog {
    time: usize,
    task: usize,
    arm: usize,
    reward: f64,
    regret: f64,
    width: f64,
}

impl From<&RoundLog> for PyRoundLog {
    fn from(l: &RoundLog) -> Self {
        Self {
            time: l.time,
            task: l.task,
            arm: l.arm,
            reward: l.reward,
            regret: l.regret(),
            width: l.width_chosen(),
        }
    }
}

#[pymethods]
impl PyRoundLog {
    fn __repr__(&self) -> String {
        format!(
            "RoundLog(time={}, task={}, arm={}, reward={}, regret={})",
            self.time, self.task, self.arm, self.reward, self.regret
        )
    }
}

fn policy(kernel: &PyKernel, similarity: &PySimilarity, beta: f64, lam: f64) -> PolicyConfig {
    PolicyConfig::new(kernel.inner, similarity.inner.clone())
        .with_beta(beta)
        .with_lambda(lam)
        .with_solver(Solver::Cholesky)
}

/// Runs the UCB policy on the synthetic environment.
///
/// `schedule` is `"parallel"`, `"sequential"` or `"independent"`.
#[pyfunction]
#[pyo3(signature = (env, kernel, similarity, horizon, beta = 1.0, lam = 1.0, schedule = "parallel"))]
fn run_bandit(
    py: Python<'_>,
    env: &PySyntheticEnv,
    kernel: PyKernel,
    similarity: PySimilarity,
    horizon: usize,
    beta: f64,
    lam: f64,
    schedule: &str,
) -> PyResult<Vec<PyRoundLog>> {
    let cfg = policy(&kernel, &similarity, beta, lam);
    let env = &env.inner;
    let logs = py
        .detach(|| match schedule {
            "parallel" => Some(bandit::run_parallel(env, &cfg, horizon)),
            "sequential" => Some(bandit::run_sequential(env, &cfg, horizon)),
            "independent" => Some(bandit::run_independent(env, &cfg, horizon)),
            _ => None,
        })
        .ok_or_else(|| PyValueError::new_err(format!("unknown schedule {schedule:?}")))?
        .map_err(to_py)?;
    Ok(logs.iter().map(PyRoundLog::from).collect())
}

/// Cumulative pseudo-regret summed over tasks, per time step.
#[pyfunction]
fn regret_curve(logs: Vec<PyRef<'_, PyRoundLog>>) -> Vec<f64> {
    let horizon = logs.iter().map(|l| l.time + 1).max().unwrap_or(0);
    let mut per_step = vec![0.0; horizon];
    for l in &logs {
        per_step[l.time] += l.regret;
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

#[pyfunction]
fn median_heuristic(xs: Vec<Vec<f64>>) -> PyResult<f64> {
    kernels::median_heuristic(&xs).map_err(to_py)
}

/// Similarity from conditional kernel embeddings of `(xs, ys)` datasets.
#[pyfunction]
#[pyo3(signature = (data, kx, ky, reg = 0.1))]
fn cke_similarity(
    data: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    kx: PyKernel,
    ky: PyKernel,
    reg: f64,
) -> PyResult<PySimilarity> {
    let inner = similarity::cke_similarity(&datasets(data)?, &kx.inner, &ky.inner, Regularizer::PerSample(reg))
        .map_err(to_py)?;
    Ok(PySimilarity { inner })
}

/// Squared embedding distance between two datasets, fixed ridge `lam`.
#[pyfunction]
fn cke_distance_sq(
    a: (Vec<Vec<f64>>, Vec<f64>),
    b: (Vec<Vec<f64>>, Vec<f64>),
    kx: PyKernel,
    ky: PyKernel,
    lam: f64,
) -> PyResult<f64> {
    let d = datasets(vec![a, b])?;
    similarity::cke_distance_sq(&d[0], &d[1], &kx.inner, &ky.inner, Regularizer::Fixed(lam)).map_err(to_py)
}

/// Symmetrized cross-task R² similarity.
#[pyfunction]
#[pyo3(signature = (data, kx, lam = 0.1, floor = -0.5))]
fn r2_similarity(data: Vec<(Vec<Vec<f64>>, Vec<f64>)>, kx: PyKernel, lam: f64, floor: f64) -> PyResult<PySimilarity> {
    let inner = similarity::r2_similarity(&datasets(data)?, &kx.inner, lam, floor).map_err(to_py)?;
    Ok(PySimilarity { inner })
}

/// `log g` for a history of `(task, context)` pairs.
#[pyfunction]
fn compute_log_g(points: Vec<(usize, Vec<f64>)>, similarity: PySimilarity, kx: PyKernel, lam: f64) -> PyResult<f64> {
    harness::compute_log_g(&history(points)?, &similarity.inner, &kx.inner, lam).map_err(to_py)
}

/// `g = det(K̃ + λI) / λⁿ`; may overflow to `inf` where `compute_log_g`
/// stays finite.
#[pyfunction]
fn compute_g(points: Vec<(usize, Vec<f64>)>, similarity: PySimilarity, kx: PyKernel, lam: f64) -> PyResult<f64> {
    compute_log_g(points, similarity, kx, lam).map(f64::exp)
}

#[pymodule]
fn pymtbandit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyKernel>()?;
    m.add_class::<PySimilarity>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySyntheticEnv>()?;
    m.add_class::<PyRoundLog>()?;
    m.add_function(wrap_pyfunction!(run_bandit, m)?)?;
    m.add_function(wrap_pyfunction!(regret_curve, m)?)?;
    m.add_function(wrap_pyfunction!(median_heuristic, m)?)?;
    m.add_function(wrap_pyfunction!(cke_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(cke_distance_sq, m)?)?;
    m.add_function(wrap_pyfunction!(r2_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(compute_log_g, m)?)?;
    m.add_function(wrap_pyfunction!(compute_g, m)?)?;
    Ok(())
}
