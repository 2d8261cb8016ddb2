use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TheoryParams;
use crate::error::{Error, Result};
use crate::kernels::{ContextVector, KernelSpec};
use crate::krr::{AugmentedContext, ModelState};
use crate::similarity::SimilarityMatrix;

/// Relative eigenvalue cutoff for numerical rank.
const RANK_TOL: f64 = 1e-10;
/// Allowed relative increase of g between consecutive similarity levels.
pub const MONOTONE_TOL: f64 = 1e-9;

/// `log g = log det(K̃ + λI) − n log λ` over the given contexts.
///
/// Computed from a Cholesky factor of `I + K̃/λ`, so it stays finite where
/// `g` itself would overflow. Never negative, since `K̃` is PSD.
pub fn compute_log_g(
    history: &[AugmentedContext],
    similarity: &SimilarityMatrix,
    kx: &KernelSpec,
    lambda: f64,
) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Empty("history"));
    }
    let mut model = ModelState::new(*kx, similarity.clone(), lambda)?;
    let obs: Vec<(AugmentedContext, f64)> = history.iter().map(|x| (x.clone(), 0.0)).collect();
    model.append_batch(&obs)?;
    let scaled = model.system_matrix() / lambda;
    let chol = Cholesky::new(scaled).ok_or(Error::Factorization("Cholesky of I + K̃/λ"))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Number of eigenvalues above `1e-10` times the largest.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&v| v > RANK_TOL * top).count()
}

/// One instance of the rank bound `log g ≤ r_z·r_x·log(((T+1)c + λ)/λ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankBoundCase {
    pub log_g: f64,
    pub rank_z: usize,
    pub rank_x: usize,
    /// Largest diagonal entry of `K̃`.
    pub c: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn rank_bound(
    history: &[AugmentedContext],
    similarity: &SimilarityMatrix,
    kx: &KernelSpec,
    lambda: f64,
) -> Result<RankBoundCase> {
    let log_g = compute_log_g(history, similarity, kx, lambda)?;
    let xs: Vec<&[f64]> = history.iter().map(|h| h.context.as_slice()).collect();
    let gram_x = crate::kernels::gram(kx, &xs)?.entries;
    let rank_x = numerical_rank(&gram_x);
    let rank_z = numerical_rank(similarity.entries());
    let c = history
        .iter()
        .zip(0..)
        .map(|(h, i)| similarity.get(h.task, h.task) * gram_x[(i, i)])
        .fold(0.0, f64::max);
    let n = history.len() as f64;
    let bound = (rank_z * rank_x) as f64 * ((n * c + lambda) / lambda).ln();
    Ok(RankBoundCase {
        log_g,
        rank_z,
        rank_x,
        c,
        bound,
        holds: log_g <= bound,
    })
}

/// `log g` along a grid of uniform task similarities `μ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityCheck {
    pub mu: Vec<f64>,
    pub log_g: Vec<f64>,
    /// Grid indices `i` where `g(μ_{i+1})` exceeds `g(μ_i)` beyond tolerance.
    pub violations: Vec<usize>,
}

/// Evaluates `g` on the same contexts with `K_Z = (1−μ)I + μ11ᵀ` for each
/// `μ` in an ascending grid and flags increases.
pub fn check_monotonicity(
    mu_grid: &[f64],
    contexts: &[AugmentedContext],
    kx: &KernelSpec,
    lambda: f64,
) -> Result<MonotonicityCheck> {
    if mu_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("mu_grid", "must be ascending"));
    }
    let tasks = contexts.iter().map(|c| c.task + 1).max().unwrap_or(1);
    let log_g = mu_grid
        .iter()
        .map(|&mu| compute_log_g(contexts, &SimilarityMatrix::uniform(tasks, mu)?, kx, lambda))
        .collect::<Result<Vec<_>>>()?;
    // g₂ ≤ g₁(1 + tol)  ⇔  log g₂ − log g₁ ≤ ln(1 + tol)
    let slack = MONOTONE_TOL.ln_1p();
    let violations = log_g
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] - w[0] > slack)
        .map(|(i, _)| i)
        .collect();
    Ok(MonotonicityCheck {
        mu: mu_grid.to_vec(),
        log_g,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    /// `g` of each rank-bound instance.
    pub g: Vec<f64>,
    pub rank_bound: Vec<RankBoundCase>,
    pub monotonicity: Vec<MonotonicityCheck>,
}

impl TheoryReport {
    pub fn rank_violations(&self) -> usize {
        self.rank_bound.iter().filter(|c| !c.holds).count()
    }

    pub fn monotonicity_violations(&self) -> usize {
        self.monotonicity.iter().map(|m| m.violations.len()).sum()
    }
}

/// Similarity matrix `VVᵀ` from `rank` random nonnegative directions, with
/// rows of `V` scaled to unit length so the diagonal is one.
pub fn random_low_rank_similarity(rng: &mut impl Rng, tasks: usize, rank: usize) -> Result<SimilarityMatrix> {
    let mut v = DMatrix::from_fn(tasks, rank, |_, _| rng.random::<f64>() + 1e-3);
    for mut row in v.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    let mut kz = &v * v.transpose();
    for i in 0..tasks {
        kz[(i, i)] = 1.0;
        for j in 0..i {
            let s = (0.5 * (kz[(i, j)] + kz[(j, i)])).clamp(0.0, 1.0);
            kz[(i, j)] = s;
            kz[(j, i)] = s;
        }
    }
    SimilarityMatrix::new(kz)
}

fn random_contexts(rng: &mut impl Rng, n: usize, tasks: usize, dim: usize) -> Result<Vec<AugmentedContext>> {
    (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            Ok(AugmentedContext::new(i % tasks, ContextVector::new(x)?))
        })
        .collect()
}

/// Rank-bound instances alternate between a linear context kernel (low
/// `r_x`) and a Gaussian one, with `K_Z` of rank 1 to `tasks`; the
/// monotonicity sets use a Gaussian kernel on fresh random contexts.
pub fn run_theory_checks(params: &TheoryParams, seed: u64) -> Result<TheoryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.horizon + 1;
    let mut rank_cases = Vec::with_capacity(params.instances);
    for i in 0..params.instances {
        let rank = 1 + i % params.tasks;
        let kz = random_low_rank_similarity(&mut rng, params.tasks, rank)?;
        let kx = if i % 2 == 0 {
            KernelSpec::linear()
        } else {
            KernelSpec::gaussian(0.2 + rng.random::<f64>(), 1.0)?
        };
        let contexts = random_contexts(&mut rng, n, params.tasks, params.context_dim)?;
        rank_cases.push(rank_bound(&contexts, &kz, &kx, params.lambda)?);
    }
    let grid = params.mu_grid();
    let mut mono = Vec::with_capacity(params.mu_sets);
    for _ in 0..params.mu_sets {
        let kx = KernelSpec::gaussian(0.2 + rng.random::<f64>(), 1.0)?;
        let contexts = random_contexts(&mut rng, n, params.tasks, params.context_dim)?;
        mono.push(check_monotonicity(&grid, &contexts, &kx, params.lambda)?);
    }
    Ok(TheoryReport {
        g: rank_cases.iter().map(|c| c.log_g.exp()).collect(),
        rank_bound: rank_cases,
        monotonicity: mono,
    })
}
