//! Task-similarity estimation.
//!
//! Two estimators are provided: a distance between conditional kernel
//! embeddings of `P(Y | X)` for each task, turned into a similarity with a
//! Gaussian of that distance, and a symmetrized cross-task R² score.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cross_gram, median, min_eigenvalue, ContextVector, KernelSpec};
use crate::krr::fit_predict_batch;

/// Observed `(context, reward)` pairs for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub points: Vec<(ContextVector, f64)>,
}

impl TaskDataset {
    pub fn new(points: Vec<(ContextVector, f64)>) -> Result<Self> {
        if points.iter().any(|(_, y)| !y.is_finite()) {
            return Err(Error::NonFinite("dataset target"));
        }
        if let Some((first, _)) = points.first() {
            let dim = first.dim();
            if let Some((bad, _)) = points.iter().find(|(x, _)| x.dim() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: bad.dim(),
                });
            }
        }
        Ok(Self { points })
    }

    pub fn from_pairs(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch {
                left: xs.len(),
                right: ys.len(),
            });
        }
        let points = xs
            .into_iter()
            .zip(ys)
            .map(|(x, y)| Ok((ContextVector::new(x)?, y)))
            .collect::<Result<_>>()?;
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|(x, _)| x.dim())
    }

    pub fn xs(&self) -> Vec<&[f64]> {
        self.points.iter().map(|(x, _)| x.as_slice()).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|(_, y)| *y).collect()
    }

    fn y_points(&self) -> Vec<[f64; 1]> {
        self.points.iter().map(|(_, y)| [*y]).collect()
    }
}

/// Symmetric `M x M` task-similarity matrix with unit diagonal and entries
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    entries: DMatrix<f64>,
}

impl SimilarityMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let m = entries.nrows();
        if m == 0 || entries.ncols() != m {
            return Err(Error::invalid(
                "similarity",
                format!("must be a non-empty square matrix, got {}x{}", m, entries.ncols()),
            ));
        }
        for i in 0..m {
            if entries[(i, i)] != 1.0 {
                return Err(Error::invalid("similarity", format!("diagonal entry {i} is not 1")));
            }
            for j in 0..m {
                let v = entries[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid("similarity", format!("entry ({i},{j}) = {v} outside [0,1]")));
                }
                if (v - entries[(j, i)]).abs() > 1e-12 {
                    return Err(Error::invalid("similarity", format!("not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            entries: DMatrix::identity(m, m),
        }
    }

    /// Unit diagonal and `mu` everywhere else.
    pub fn uniform(m: usize, mu: f64) -> Result<Self> {
        let mut e = DMatrix::from_element(m, m, mu);
        e.fill_diagonal(1.0);
        Self::new(e)
    }

    pub fn num_tasks(&self) -> usize {
        self.entries.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn is_identity(&self) -> bool {
        self.entries == DMatrix::identity(self.num_tasks(), self.num_tasks())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.entries)
    }

    /// Principal submatrix for the listed tasks, in order.
    pub fn select(&self, tasks: &[usize]) -> Result<Self> {
        let m = self.num_tasks();
        if let Some(&t) = tasks.iter().find(|&&t| t >= m) {
            return Err(Error::TaskOutOfRange { task: t, tasks: m });
        }
        Self::new(DMatrix::from_fn(tasks.len(), tasks.len(), |i, j| {
            self.entries[(tasks[i], tasks[j])]
        }))
    }

    /// Headerless CSV, one row per task.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for i in 0..self.num_tasks() {
            w.write_record(self.entries.row(i).iter().map(|v| format!("{v:.17e}")))?;
        }
        w.flush().map_err(|e| Error::io("similarity csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid("similarity", format!("bad number {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("similarity", "csv is not square"));
        }
        Self::new(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
    }
}

/// Ridge term for each task's conditional embedding estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Regularizer {
    /// The same λ for every dataset.
    Fixed(f64),
    /// λ = c · n for a dataset of n points.
    PerSample(f64),
}

impl Default for Regularizer {
    fn default() -> Self {
        Regularizer::PerSample(0.1)
    }
}

impl Regularizer {
    pub fn for_size(&self, n: usize) -> f64 {
        match *self {
            Regularizer::Fixed(l) => l,
            Regularizer::PerSample(c) => c * n as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            Regularizer::Fixed(l) | Regularizer::PerSample(l) => l,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid("regularizer", "must be positive and finite"))
        }
    }
}

/// Per-dataset quantities reused across all pairs.
struct Embedding<'a> {
    xs: Vec<&'a [f64]>,
    ys: Vec<[f64; 1]>,
    // (K + λI)⁻¹
    ridge_inv: DMatrix<f64>,
    // ‖Ô‖²_F
    self_term: f64,
}

impl<'a> Embedding<'a> {
    fn new(d: &'a TaskDataset, kx: &KernelSpec, ky: &KernelSpec, reg: Regularizer) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Empty("task dataset"));
        }
        let xs = d.xs();
        let ys = d.y_points();
        let k = cross_gram(kx, &xs, &xs);
        let l = cross_gram(ky, &ys, &ys);
        let lambda = reg.for_size(d.len());
        let mut reg_k = k.clone();
        for i in 0..d.len() {
            reg_k[(i, i)] += lambda;
        }
        let ridge_inv = Cholesky::new(reg_k)
            .ok_or(Error::Factorization("Cholesky of K + λI"))?
            .inverse();
        let self_term = trace_of_product(&(&ridge_inv * &k * &ridge_inv), &l);
        Ok(Self {
            xs,
            ys,
            ridge_inv,
            self_term,
        })
    }

    // ⟨Ô_self, Ô_other⟩_F = tr((K_m+λI)⁻¹ K_mn (K_n+λI)⁻¹ L_nm)
    fn cross_term(&self, other: &Embedding<'_>, kx: &KernelSpec, ky: &KernelSpec) -> f64 {
        let k_mn = cross_gram(kx, &self.xs, &other.xs);
        let l_nm = cross_gram(ky, &other.ys, &self.ys);
        trace_of_product(&(&self.ridge_inv * k_mn * &other.ridge_inv), &l_nm)
    }
}

/// `tr(A B)` without forming the product.
fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

fn clamp_distance(d: f64, scale: f64) -> f64 {
    if d >= 0.0 {
        d
    } else {
        if d < -1e-9 * scale.max(1.0) {
            log::warn!("conditional embedding distance² {d:.3e} is negative beyond roundoff");
        }
        0.0
    }
}

fn check_dims(datasets: &[&TaskDataset]) -> Result<()> {
    let mut dim = None;
    for d in datasets {
        if let Some(dd) = d.dim() {
            match dim {
                None => dim = Some(dd),
                Some(e) if e != dd => return Err(Error::DimensionMismatch { expected: e, got: dd }),
                _ => {}
            }
        }
    }
    Ok(())
}

/// Squared Hilbert–Schmidt distance between the estimated conditional
/// embedding operators of two datasets.
pub fn cke_distance_sq(
    dm: &TaskDataset,
    dn: &TaskDataset,
    kx: &KernelSpec,
    ky: &KernelSpec,
    reg: Regularizer,
) -> Result<f64> {
    reg.validate()?;
    check_dims(&[dm, dn])?;
    let em = Embedding::new(dm, kx, ky, reg)?;
    let en = Embedding::new(dn, kx, ky, reg)?;
    let cross = em.cross_term(&en, kx, ky);
    Ok(clamp_distance(
        em.self_term - 2.0 * cross + en.self_term,
        em.self_term + en.self_term,
    ))
}

/// Pairwise squared embedding distances for all datasets.
pub fn cke_distances(
    datasets: &[TaskDataset],
    kx: &KernelSpec,
    ky: &KernelSpec,
    reg: Regularizer,
) -> Result<DMatrix<f64>> {
    reg.validate()?;
    check_dims(&datasets.iter().collect::<Vec<_>>())?;
    let embeddings = datasets
        .iter()
        .map(|d| Embedding::new(d, kx, ky, reg))
        .collect::<Result<Vec<_>>>()?;
    let m = datasets.len();
    let mut dist = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            let (a, b) = (&embeddings[i], &embeddings[j]);
            let d = clamp_distance(
                a.self_term - 2.0 * a.cross_term(b, kx, ky) + b.self_term,
                a.self_term + b.self_term,
            );
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }
    Ok(dist)
}

/// Gaussian similarity of embedding distances, bandwidth set to the median
/// pairwise distance (1.0 if that median is zero).
pub fn cke_similarity(
    datasets: &[TaskDataset],
    kx: &KernelSpec,
    ky: &KernelSpec,
    reg: Regularizer,
) -> Result<SimilarityMatrix> {
    if datasets.len() < 2 {
        return Err(Error::Empty("similarity needs at least two datasets"));
    }
    let dist_sq = cke_distances(datasets, kx, ky, reg)?;
    similarity_from_distances(&dist_sq)
}

/// `exp(-d² / 2σ²)` with σ the median off-diagonal distance.
pub fn similarity_from_distances(dist_sq: &DMatrix<f64>) -> Result<SimilarityMatrix> {
    let m = dist_sq.nrows();
    let mut pair_dists: Vec<f64> = (0..m)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| dist_sq[(i, j)].sqrt())
        .collect();
    let sigma = if pair_dists.is_empty() {
        1.0
    } else {
        let med = median(&mut pair_dists);
        if med > 0.0 {
            med
        } else {
            1.0
        }
    };
    let entries = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else {
            (-dist_sq[(i, j)] / (2.0 * sigma * sigma)).exp()
        }
    });
    let sim = SimilarityMatrix::new(entries)?;
    log::debug!("similarity min eigenvalue {:.3e}", sim.min_eigenvalue());
    Ok(sim)
}

/// R² of a kernel ridge regressor trained on `train` and scored on `test`.
pub fn cross_r2(
    train: &TaskDataset,
    test: &TaskDataset,
    test_task: usize,
    kx: &KernelSpec,
    lambda: f64,
) -> Result<f64> {
    let train_pts: Vec<(&[f64], f64)> = train.points.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let pred = fit_predict_batch(&train_pts, &test.xs(), kx, lambda)?;
    let ys = test.ys();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let total: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
    if total <= 0.0 {
        return Err(Error::ZeroVariance { task: test_task });
    }
    let ss: f64 = ys.iter().zip(&pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss / total)
}

/// Symmetrized cross-task R² similarity.
///
/// Entry `(m, n)` averages the R² of a model trained on `m` and tested on
/// `n` with the reverse direction. Averages below `floor` become 0, and the
/// result is clamped to `[0, 1]`.
pub fn r2_similarity(
    datasets: &[TaskDataset],
    kx: &KernelSpec,
    lambda: f64,
    floor: f64,
) -> Result<SimilarityMatrix> {
    if datasets.len() < 2 {
        return Err(Error::Empty("similarity needs at least two datasets"));
    }
    if floor > 0.0 {
        return Err(Error::invalid("r2 floor", "must be ≤ 0"));
    }
    check_dims(&datasets.iter().collect::<Vec<_>>())?;
    if let Some(task) = datasets.iter().position(|d| d.len() < 2) {
        return Err(Error::invalid("dataset", format!("task {task} needs at least two points")));
    }
    let m = datasets.len();
    let mut e = DMatrix::identity(m, m);
    for i in 0..m {
        for j in 0..i {
            let a = cross_r2(&datasets[i], &datasets[j], j, kx, lambda)?;
            let b = cross_r2(&datasets[j], &datasets[i], i, kx, lambda)?;
            let avg = 0.5 * (a + b);
            let v = if avg < floor { 0.0 } else { avg.clamp(0.0, 1.0) };
            e[(i, j)] = v;
            e[(j, i)] = v;
        }
    }
    SimilarityMatrix::new(e)
}
