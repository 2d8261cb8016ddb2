//! Kernel ridge regression over augmented (task, context) inputs.
//!
//! [`ModelState`] keeps the history together with a factorization of
//! `K̃ + λI` that grows one block at a time, so an append costs O(n²)
//! instead of a fresh O(n³) factorization. Two representations are
//! available (see [`Solver`]): the explicit inverse, updated with the
//! block-inverse identity, and a lower Cholesky factor extended by new rows.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, Dim, Dyn, Matrix, StorageMut};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cross_gram, ContextVector, KernelSpec};
use crate::similarity::SimilarityMatrix;

/// Residual above which a scheduled checkpoint refactorizes the inverse.
const PROBE_TOLERANCE: f64 = 1e-9;

/// Widths in `(-WIDTH_CLAMP, 0)` are roundoff and clamp to zero.
const WIDTH_CLAMP: f64 = 1e-9;

/// A context tagged with the (zero-based) task that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedContext {
    pub task: usize,
    pub context: ContextVector,
}

impl AugmentedContext {
    pub fn new(task: usize, context: ContextVector) -> Self {
        Self { task, context }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub width: f64,
}

/// Predictions for a set of queries plus the kernel columns behind them.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub queries: Vec<AugmentedContext>,
    pub predictions: Vec<Prediction>,
    history_len: usize,
    // k̃ between history and queries, and A⁻¹ or L⁻¹ applied to it
    kq: DMatrix<f64>,
    solved: DMatrix<f64>,
}

/// How `(K̃ + λI)⁻¹` is represented.
///
/// Both give the same predictions up to roundoff. The block inverse makes
/// [`ModelState::inverse`] free; the Cholesky factor needs one triangular
/// solve per prediction batch and no O(n²) rewrite on append, which is
/// roughly three times faster for large histories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    BlockInverse,
    Cholesky,
}

/// When the maintained inverse is checked against a direct factorization.
///
/// Every `every` appends a checkpoint runs. With `always` set the checkpoint
/// refactorizes unconditionally; otherwise it first measures the residual
/// `A⁻¹(Av) - v` on a fixed probe vector (O(n²)) and refactorizes only when
/// that exceeds `1e-9`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefreshPolicy {
    pub every: Option<usize>,
    #[serde(default)]
    pub always: bool,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        Self {
            every: Some(512),
            always: false,
        }
    }
}

/// Growing multi-task kernel ridge regression state.
#[derive(Debug, Clone)]
pub struct ModelState {
    kx: KernelSpec,
    similarity: SimilarityMatrix,
    lambda: f64,
    refresh: RefreshPolicy,
    solver: Solver,
    dim: Option<usize>,
    // Flattened history contexts, row i at `xs[i*dim..(i+1)*dim]`.
    xs: Vec<f64>,
    tasks: Vec<usize>,
    rewards: Vec<f64>,
    // Top-left `n x n` block holds (K̃ + λI)⁻¹, or its lower Cholesky factor
    // L; the rest is spare capacity.
    factor: DMatrix<f64>,
    // (K̃ + λI)⁻¹ y for the block inverse, L⁻¹ y for Cholesky.
    weights: DVector<f64>,
    since_checkpoint: usize,
    refreshes: usize,
}

impl ModelState {
    pub fn new(kx: KernelSpec, similarity: SimilarityMatrix, lambda: f64) -> Result<Self> {
        kx.validate()?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be positive and finite"));
        }
        Ok(Self {
            kx,
            similarity,
            lambda,
            refresh: RefreshPolicy::default(),
            solver: Solver::default(),
            dim: None,
            xs: Vec::new(),
            tasks: Vec::new(),
            rewards: Vec::new(),
            factor: DMatrix::zeros(0, 0),
            weights: DVector::zeros(0),
            since_checkpoint: 0,
            refreshes: 0,
        })
    }

    pub fn with_refresh(mut self, refresh: RefreshPolicy) -> Self {
        self.refresh = refresh;
        self
    }

    /// Chooses the representation; switching on a non-empty model
    /// refactorizes from scratch.
    pub fn with_solver(mut self, solver: Solver) -> Result<Self> {
        if solver != self.solver {
            self.solver = solver;
            self.refresh_inverse()?;
        }
        Ok(self)
    }

    pub fn solver(&self) -> Solver {
        self.solver
    }

    /// Preallocates room for `total` observations.
    pub fn reserve(&mut self, total: usize) {
        if total > self.capacity() {
            self.grow_to(total);
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kx
    }

    pub fn similarity(&self) -> &SimilarityMatrix {
        &self.similarity
    }

    pub fn num_tasks(&self) -> usize {
        self.similarity.num_tasks()
    }

    /// Number of full refactorizations performed so far.
    pub fn refresh_count(&self) -> usize {
        self.refreshes
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn history(&self) -> impl Iterator<Item = (usize, &[f64], f64)> + '_ {
        let dim = self.dim.unwrap_or(0);
        (0..self.len()).map(move |i| (self.tasks[i], &self.xs[i * dim..(i + 1) * dim], self.rewards[i]))
    }

    /// `(K̃ + λI)⁻¹`: a copy of the maintained block inverse, or O(n³) from
    /// the Cholesky factor.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.len();
        let f = self.factor.view((0, 0), (n, n));
        match self.solver {
            Solver::BlockInverse => f.into_owned(),
            Solver::Cholesky => {
                let mut linv = DMatrix::identity(n, n);
                solve_lower_blocked(&f, &mut linv);
                linv.tr_mul(&linv)
            }
        }
    }

    /// Swaps in a new task similarity and refactorizes from scratch.
    pub fn set_similarity(&mut self, similarity: SimilarityMatrix) -> Result<()> {
        if let Some(&t) = self.tasks.iter().find(|&&t| t >= similarity.num_tasks()) {
            return Err(Error::TaskOutOfRange {
                task: t,
                tasks: similarity.num_tasks(),
            });
        }
        self.similarity = similarity;
        self.refresh_inverse()
    }

    fn capacity(&self) -> usize {
        self.factor.nrows()
    }

    fn grow_to(&mut self, needed: usize) {
        let n = self.len();
        let cap = needed.max(2 * self.capacity()).max(16);
        let mut factor = DMatrix::zeros(cap, cap);
        factor
            .view_mut((0, 0), (n, n))
            .copy_from(&self.factor.view((0, 0), (n, n)));
        let mut weights = DVector::zeros(cap);
        weights.rows_mut(0, n).copy_from(&self.weights.rows(0, n));
        self.factor = factor;
        self.weights = weights;
    }

    fn check_query(&self, x: &AugmentedContext) -> Result<()> {
        if x.task >= self.num_tasks() {
            return Err(Error::TaskOutOfRange {
                task: x.task,
                tasks: self.num_tasks(),
            });
        }
        if let Some(dim) = self.dim {
            if x.context.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x.context.dim(),
                });
            }
        }
        Ok(())
    }

    #[inline]
    fn aug_kernel(&self, task_a: usize, xa: &[f64], task_b: usize, xb: &[f64]) -> f64 {
        let kz = self.similarity.get(task_a, task_b);
        if kz == 0.0 {
            0.0
        } else {
            crate::kernels::product_kernel(kz, self.kx.eval_unchecked(xa, xb))
        }
    }

    fn history_x(&self, i: usize) -> &[f64] {
        let dim = self.dim.unwrap_or(0);
        &self.xs[i * dim..(i + 1) * dim]
    }

    /// Column of k̃ values between the history and each query.
    fn query_block(&self, queries: &[AugmentedContext]) -> DMatrix<f64> {
        let n = self.len();
        let mut k = DMatrix::zeros(n, queries.len());
        for (j, q) in queries.iter().enumerate() {
            for i in 0..n {
                k[(i, j)] = self.aug_kernel(self.tasks[i], self.history_x(i), q.task, &q.context);
            }
        }
        k
    }

    /// Posterior-style mean and UCB width at one augmented context.
    pub fn predict(&self, x: &AugmentedContext) -> Result<Prediction> {
        Ok(self.predict_many(std::slice::from_ref(x))?[0])
    }

    /// Batched [`predict`](Self::predict); one matrix product for all queries.
    pub fn predict_many(&self, queries: &[AugmentedContext]) -> Result<Vec<Prediction>> {
        Ok(self.predict_batch(queries.to_vec())?.predictions)
    }

    /// Like [`predict_many`](Self::predict_many) but keeps the intermediate
    /// kernel columns so that chosen queries can be appended through
    /// [`append_chosen`](Self::append_chosen) without recomputing them.
    pub fn predict_batch(&self, queries: Vec<AugmentedContext>) -> Result<QueryBatch> {
        for q in &queries {
            self.check_query(q)?;
        }
        let n = self.len();
        let kq = self.query_block(&queries);
        let f = self.factor.view((0, 0), (n, n));
        let w = self.weights.rows(0, n);
        let solved = match self.solver {
            Solver::BlockInverse => f * &kq,
            Solver::Cholesky => {
                let mut z = kq.clone();
                solve_lower_blocked(&f, &mut z);
                z
            }
        };
        // block inverse: mean = kᵀα, width² = k(x,x) - kᵀA⁻¹k
        // Cholesky, z = L⁻¹k: mean = zᵀL⁻¹y, width² = k(x,x) - zᵀz
        let predictions = queries
            .iter()
            .enumerate()
            .map(|(j, q)| {
                let kk = self.aug_kernel(q.task, &q.context, q.task, &q.context);
                let s = solved.column(j);
                let (mean, quad) = match self.solver {
                    Solver::BlockInverse => (kq.column(j).dot(&w), kq.column(j).dot(&s)),
                    Solver::Cholesky => (s.dot(&w), s.norm_squared()),
                };
                Prediction {
                    mean,
                    width: clamp_width(kk - quad),
                }
            })
            .collect();
        Ok(QueryBatch {
            queries,
            history_len: n,
            kq,
            solved,
            predictions,
        })
    }

    pub fn append(&mut self, x: AugmentedContext, reward: f64) -> Result<()> {
        self.append_batch(&[(x, reward)])
    }

    /// Appends a block of observations with one factor update.
    ///
    /// With the old system `A`, new cross block `B` and new corner
    /// `C = K̃_new + λI`, the updated inverse is
    ///
    /// ```text
    /// [ A⁻¹ + P D⁻¹ Pᵀ   -P D⁻¹ ]     P = A⁻¹ B
    /// [ -D⁻¹ Pᵀ           D⁻¹   ]     D = C - Bᵀ P
    /// ```
    ///
    /// where the top-left block is the inverse of the Schur complement of
    /// `C`, `S = A - B C⁻¹ Bᵀ`, expanded through the Woodbury identity.
    /// The Cholesky factor instead gains the rows `[Zᵀ  chol(C - ZᵀZ)]`
    /// with `Z = L⁻¹ B`.
    pub fn append_batch(&mut self, obs: &[(AugmentedContext, f64)]) -> Result<()> {
        if obs.is_empty() {
            return Ok(());
        }
        let queries: Vec<AugmentedContext> = obs.iter().map(|(x, _)| x.clone()).collect();
        let batch = self.predict_batch(queries)?;
        let chosen: Vec<(usize, f64)> = obs.iter().enumerate().map(|(i, (_, r))| (i, *r)).collect();
        self.append_chosen(&batch, &chosen)
    }

    /// Appends `(query index, reward)` pairs from a batch predicted on the
    /// current model.
    pub fn append_chosen(&mut self, batch: &QueryBatch, chosen: &[(usize, f64)]) -> Result<()> {
        if chosen.is_empty() {
            return Ok(());
        }
        if batch.history_len != self.len() {
            return Err(Error::invalid("batch", "was predicted on an older model"));
        }
        let dim = self.dim.unwrap_or(batch.queries[0].context.dim());
        for &(i, r) in chosen {
            let x = batch.queries.get(i).ok_or(Error::invalid("chosen", "query index out of range"))?;
            if x.context.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x.context.dim(),
                });
            }
            if !r.is_finite() {
                return Err(Error::NonFinite("reward"));
            }
        }
        self.dim = Some(dim);

        let n = self.len();
        let k = chosen.len();
        if n + k > self.capacity() {
            self.grow_to(n + k);
        }
        let idx: Vec<usize> = chosen.iter().map(|&(i, _)| i).collect();
        let b = batch.kq.select_columns(&idx);
        let solved = batch.solved.select_columns(&idx);
        let mut c = DMatrix::zeros(k, k);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                let (xi, xj) = (&batch.queries[i], &batch.queries[j]);
                c[(a, b)] = self.aug_kernel(xi.task, &xi.context, xj.task, &xj.context);
            }
            c[(a, a)] += self.lambda;
        }
        let y_new = DVector::from_iterator(k, chosen.iter().map(|&(_, r)| r));
        match self.solver {
            Solver::BlockInverse => self.extend_inverse(&b, solved, c, y_new)?,
            Solver::Cholesky => self.extend_cholesky(solved, c, y_new)?,
        }

        for &(i, r) in chosen {
            let x = &batch.queries[i];
            self.xs.extend_from_slice(&x.context);
            self.tasks.push(x.task);
            self.rewards.push(r);
        }

        self.since_checkpoint += k;
        if let Some(every) = self.refresh.every {
            if every > 0 && self.since_checkpoint >= every {
                self.since_checkpoint = 0;
                if self.refresh.always || self.probe_residual() > PROBE_TOLERANCE {
                    self.refresh_inverse()?;
                }
            }
        }
        Ok(())
    }

    fn extend_inverse(&mut self, b: &DMatrix<f64>, p: DMatrix<f64>, c: DMatrix<f64>, y_new: DVector<f64>) -> Result<()> {
        let (n, k) = (self.len(), c.nrows());
        let d = c - b.tr_mul(&p);
        let d_inv = invert_spd(&d)?;

        // residual of the old predictor on the new targets
        let e = b.tr_mul(&self.weights.rows(0, n)) - &y_new;
        let q = &p * &d_inv;

        if n > 0 {
            let mut tl = self.factor.view_mut((0, 0), (n, n));
            tl.gemm(1.0, &q, &p.transpose(), 1.0);
            let neg_q = -&q;
            self.factor.view_mut((0, n), (n, k)).copy_from(&neg_q);
            self.factor.view_mut((n, 0), (k, n)).copy_from(&neg_q.transpose());
            let shift = &q * &e;
            let mut top = self.weights.rows_mut(0, n);
            top += shift;
        }
        self.factor.view_mut((n, n), (k, k)).copy_from(&d_inv);
        let bottom = -(&d_inv * &e);
        self.weights.rows_mut(n, k).copy_from(&bottom);
        Ok(())
    }

    fn extend_cholesky(&mut self, z: DMatrix<f64>, c: DMatrix<f64>, y_new: DVector<f64>) -> Result<()> {
        let (n, k) = (self.len(), c.nrows());
        let schur = c - z.tr_mul(&z);
        let corner = Cholesky::new(schur)
            .ok_or(Error::Factorization("Cholesky of appended block"))?
            .unpack();
        let mut rhs = y_new - z.tr_mul(&self.weights.rows(0, n));
        if !corner.solve_lower_triangular_mut(&mut rhs) {
            return Err(Error::Factorization("singular appended block"));
        }
        self.factor.view_mut((n, 0), (k, n)).tr_copy_from(&z);
        self.factor.view_mut((n, n), (k, k)).copy_from(&corner);
        self.weights.rows_mut(n, k).copy_from(&rhs);
        Ok(())
    }

    /// `K̃ + λI` over the current history, built from scratch.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.aug_kernel(self.tasks[i], self.history_x(i), self.tasks[j], self.history_x(j));
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            a[(i, i)] += self.lambda;
        }
        a
    }

    /// Recomputes the inverse and the dual weights by direct factorization.
    pub fn refresh_inverse(&mut self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Ok(());
        }
        let y = DVector::from_column_slice(&self.rewards);
        if n > self.capacity() {
            self.grow_to(n);
        }
        match self.solver {
            Solver::BlockInverse => {
                let inv = invert_spd(&self.system_matrix())?;
                self.factor.view_mut((0, 0), (n, n)).copy_from(&inv);
                self.weights.rows_mut(0, n).copy_from(&(&inv * y));
            }
            Solver::Cholesky => {
                let l = Cholesky::new(self.system_matrix())
                    .ok_or(Error::Factorization("Cholesky of regularized system"))?
                    .unpack();
                let mut w = y;
                solve_lower_blocked(&l.view((0, 0), (n, n)), &mut w);
                self.factor.view_mut((0, 0), (n, n)).copy_from(&l);
                self.weights.rows_mut(0, n).copy_from(&w);
            }
        }
        self.since_checkpoint = 0;
        self.refreshes += 1;
        Ok(())
    }

    /// Max-abs entry of `inverse · (K̃ + λI) - I`. O(n³); meant for checks.
    pub fn residual(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let prod = self.inverse() * self.system_matrix();
        (prod - DMatrix::<f64>::identity(n, n)).amax()
    }

    /// Max-abs of `A⁻¹(A v) - v` for a fixed ±1 probe vector; O(n²).
    pub fn probe_residual(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let v = DVector::from_iterator(n, (0..n).map(probe_sign));
        let mut av = DVector::zeros(n);
        for i in 0..n {
            let mut acc = self.lambda * v[i];
            for j in 0..n {
                acc += self.aug_kernel(self.tasks[i], self.history_x(i), self.tasks[j], self.history_x(j)) * v[j];
            }
            av[i] = acc;
        }
        (self.solve_system(av) - v).amax()
    }

    /// `(K̃ + λI)⁻¹ v` through the maintained factor.
    fn solve_system(&self, mut v: DVector<f64>) -> DVector<f64> {
        let n = self.len();
        let f = self.factor.view((0, 0), (n, n));
        match self.solver {
            Solver::BlockInverse => f * v,
            Solver::Cholesky => {
                solve_lower_blocked(&f, &mut v);
                f.tr_solve_lower_triangular_mut(&mut v);
                v
            }
        }
    }

    /// Subset of this model restricted to the given history indices, built
    /// from scratch.
    pub fn restricted(&self, indices: &[usize]) -> Result<ModelState> {
        let mut m = ModelState::new(self.kx, self.similarity.clone(), self.lambda)?
            .with_refresh(self.refresh)
            .with_solver(self.solver)?;
        let obs: Vec<(AugmentedContext, f64)> = indices
            .iter()
            .map(|&i| {
                Ok((
                    AugmentedContext::new(self.tasks[i], ContextVector::new(self.history_x(i).to_vec())?),
                    self.rewards[i],
                ))
            })
            .collect::<Result<_>>()?;
        m.append_batch(&obs)?;
        m.refresh_inverse()?;
        Ok(m)
    }
}

fn probe_sign(i: usize) -> f64 {
    // xorshift-style hash of the index
    let mut h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 31;
    if h & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn clamp_width(sq: f64) -> f64 {
    if sq > 0.0 {
        sq.sqrt()
    } else {
        debug_assert!(sq > -WIDTH_CLAMP * 1e3, "width² {sq} far below zero");
        0.0
    }
}

const SOLVE_BLOCK: usize = 256;

/// Solves `L X = B` in place for lower-triangular `L`, one block of rows at
/// a time so the bulk of the work is matrix products.
fn solve_lower_blocked<C, S>(l: &DMatrixView<'_, f64>, b: &mut Matrix<f64, Dyn, C, S>)
where
    C: Dim,
    S: StorageMut<f64, Dyn, C>,
{
    let n = l.nrows();
    for start in (0..n).step_by(SOLVE_BLOCK) {
        let size = SOLVE_BLOCK.min(n - start);
        if start > 0 {
            let (done, mut todo) = b.rows_range_pair_mut(0..start, start..start + size);
            todo.gemm(-1.0, &l.view((start, 0), (size, start)), &done, 1.0);
        }
        l.view((start, start), (size, size))
            .solve_lower_triangular_mut(&mut b.rows_mut(start, size));
    }
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub(crate) fn invert_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(a.clone())
        .ok_or(Error::Factorization("Cholesky of regularized system"))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Plain kernel ridge regression: `k(x)ᵀ (K + λI)⁻¹ y` at each test point.
pub fn fit_predict_batch<V: AsRef<[f64]>, W: AsRef<[f64]>>(
    train: &[(V, f64)],
    test: &[W],
    kx: &KernelSpec,
    lambda: f64,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", "must be positive and finite"));
    }
    let dim = train[0].0.as_ref().len();
    for x in train.iter().map(|(x, _)| x.as_ref()).chain(test.iter().map(|x| x.as_ref())) {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
    }
    let xs: Vec<&[f64]> = train.iter().map(|(x, _)| x.as_ref()).collect();
    let mut k = cross_gram(kx, &xs, &xs);
    for i in 0..xs.len() {
        k[(i, i)] += lambda;
    }
    let y = DVector::from_iterator(train.len(), train.iter().map(|(_, y)| *y));
    let chol = Cholesky::new(k).ok_or(Error::Factorization("Cholesky of K + λI"))?;
    let alpha = chol.solve(&y);
    let kt = cross_gram(kx, test, &xs);
    Ok((kt * alpha).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::LU;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss() -> KernelSpec {
        KernelSpec::gaussian(0.5, 1.0).unwrap()
    }

    fn cv(v: &[f64]) -> ContextVector {
        ContextVector::new(v.to_vec()).unwrap()
    }

    fn random_obs(rng: &mut ChaCha8Rng, tasks: usize, dim: usize) -> (AugmentedContext, f64) {
        let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        (AugmentedContext::new(rng.random_range(0..tasks), cv(&x)), rng.random::<f64>())
    }

    fn random_similarity(rng: &mut ChaCha8Rng, m: usize) -> SimilarityMatrix {
        let mut e = DMatrix::identity(m, m);
        for i in 0..m {
            for j in 0..i {
                let v = 0.3 + 0.6 * rng.random::<f64>();
                e[(i, j)] = v;
                e[(j, i)] = v;
            }
        }
        SimilarityMatrix::new(e).unwrap()
    }

    /// Independent dense oracle: builds K̃ + λI and solves with LU.
    fn dense_predict(model: &ModelState, q: &AugmentedContext) -> (f64, f64) {
        let n = model.len();
        let hist: Vec<(usize, Vec<f64>, f64)> =
            model.history().map(|(t, x, r)| (t, x.to_vec(), r)).collect();
        let kt = |ta: usize, xa: &[f64], tb: usize, xb: &[f64]| {
            model.similarity().get(ta, tb) * model.kernel().eval_unchecked(xa, xb)
        };
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = kt(hist[i].0, &hist[i].1, hist[j].0, &hist[j].1);
            }
            a[(i, i)] += model.lambda();
        }
        let kq = DVector::from_iterator(n, hist.iter().map(|h| kt(h.0, &h.1, q.task, &q.context)));
        let y = DVector::from_iterator(n, hist.iter().map(|h| h.2));
        let lu = LU::new(a);
        let mean = kq.dot(&lu.solve(&y).unwrap());
        let w2 = kt(q.task, &q.context, q.task, &q.context) - kq.dot(&lu.solve(&kq).unwrap());
        (mean, w2.max(0.0).sqrt())
    }

    #[test]
    fn empty_model_predicts_prior() {
        let m = ModelState::new(gauss(), SimilarityMatrix::identity(2), 1.0).unwrap();
        let p = m.predict(&AugmentedContext::new(1, cv(&[0.2, 0.3]))).unwrap();
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.width, 1.0);
    }

    #[test]
    fn task_out_of_range_rejected() {
        let m = ModelState::new(gauss(), SimilarityMatrix::identity(2), 1.0).unwrap();
        assert!(matches!(
            m.predict(&AugmentedContext::new(2, cv(&[0.0]))),
            Err(Error::TaskOutOfRange { task: 2, tasks: 2 })
        ));
    }

    #[test]
    fn single_observation_hand_values() {
        let mut m = ModelState::new(gauss(), SimilarityMatrix::identity(1), 1.0).unwrap();
        let x = AugmentedContext::new(0, cv(&[0.4, 0.1]));
        m.append(x.clone(), 0.8).unwrap();
        assert!((m.inverse()[(0, 0)] - 0.5).abs() < 1e-15);
        let p = m.predict(&x).unwrap();
        assert!((p.mean - 0.4).abs() < 1e-12);
        assert!((p.width - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((p.width - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn two_appends_match_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = ModelState::new(gauss(), random_similarity(&mut rng, 3), 1.0).unwrap();
        for _ in 0..2 {
            let (x, r) = random_obs(&mut rng, 3, 2);
            m.append(x, r).unwrap();
        }
        let direct = m.system_matrix().try_inverse().unwrap();
        assert!((m.inverse() - direct).amax() < 1e-12);
    }

    #[test]
    fn three_hundred_appends_track_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sim = random_similarity(&mut rng, 4);
        let mut m = ModelState::new(gauss(), sim, 1.0)
            .unwrap()
            .with_refresh(RefreshPolicy { every: None, always: false });
        for _ in 0..300 {
            let (x, r) = random_obs(&mut rng, 4, 3);
            m.append(x, r).unwrap();
        }
        let direct = m.system_matrix().try_inverse().unwrap();
        assert!((m.inverse() - direct).amax() <= 1e-6);
        assert!(m.residual() <= 1e-6);
        for _ in 0..10 {
            let (q, _) = random_obs(&mut rng, 4, 3);
            let p = m.predict(&q).unwrap();
            let (mean, width) = dense_predict(&m, &q);
            assert!((p.mean - mean).abs() <= 1e-6);
            assert!((p.width - width).abs() <= 1e-6);
        }
    }

    #[test]
    fn cholesky_solver_tracks_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let sim = random_similarity(&mut rng, 3);
        let obs: Vec<_> = (0..300).map(|_| random_obs(&mut rng, 3, 2)).collect();
        let mut chol = ModelState::new(gauss(), sim.clone(), 1.0)
            .unwrap()
            .with_solver(Solver::Cholesky)
            .unwrap();
        let mut inv = ModelState::new(gauss(), sim, 1.0).unwrap();
        for chunk in obs.chunks(7) {
            chol.append_batch(chunk).unwrap();
            inv.append_batch(chunk).unwrap();
        }
        assert!((chol.inverse() - inv.inverse()).amax() < 1e-8);
        assert!(chol.probe_residual() < 1e-9);
        let queries: Vec<_> = (0..20).map(|_| random_obs(&mut rng, 3, 2).0).collect();
        let a = chol.predict_many(&queries).unwrap();
        let b = inv.predict_many(&queries).unwrap();
        for ((p, q), x) in a.iter().zip(&b).zip(&queries) {
            let (mean, width) = dense_predict(&chol, x);
            assert!((p.mean - q.mean).abs() < 1e-8 && (p.width - q.width).abs() < 1e-8);
            assert!((p.mean - mean).abs() < 1e-8 && (p.width - width).abs() < 1e-8);
        }
        let before = chol.predict_many(&queries).unwrap();
        chol.refresh_inverse().unwrap();
        for (p, q) in chol.predict_many(&queries).unwrap().iter().zip(&before) {
            assert!((p.mean - q.mean).abs() < 1e-9 && (p.width - q.width).abs() < 1e-9);
        }
    }

    #[test]
    fn switching_solver_keeps_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut m = ModelState::new(gauss(), random_similarity(&mut rng, 2), 0.3).unwrap();
        for _ in 0..40 {
            let (x, r) = random_obs(&mut rng, 2, 2);
            m.append(x, r).unwrap();
        }
        let (q, _) = random_obs(&mut rng, 2, 2);
        let before = m.predict(&q).unwrap();
        let m = m.with_solver(Solver::Cholesky).unwrap();
        let after = m.predict(&q).unwrap();
        assert!((before.mean - after.mean).abs() < 1e-10);
        assert!((before.width - after.width).abs() < 1e-10);
        assert_eq!(m.restricted(&[0, 5, 9]).unwrap().solver(), Solver::Cholesky);
    }

    #[test]
    fn batch_append_equals_sequential_appends() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sim = random_similarity(&mut rng, 3);
        let obs: Vec<_> = (0..20).map(|_| random_obs(&mut rng, 3, 2)).collect();
        let mut a = ModelState::new(gauss(), sim.clone(), 0.5).unwrap();
        let mut b = ModelState::new(gauss(), sim, 0.5).unwrap();
        for chunk in obs.chunks(5) {
            a.append_batch(chunk).unwrap();
        }
        for (x, r) in &obs {
            b.append(x.clone(), *r).unwrap();
        }
        assert!((a.inverse() - b.inverse()).amax() < 1e-10);
    }

    #[test]
    fn refresh_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut m = ModelState::new(gauss(), random_similarity(&mut rng, 2), 1.0).unwrap();
        for _ in 0..60 {
            let (x, r) = random_obs(&mut rng, 2, 2);
            m.append(x, r).unwrap();
        }
        let qs: Vec<_> = (0..5).map(|_| random_obs(&mut rng, 2, 2).0).collect();
        let before = m.predict_many(&qs).unwrap();
        m.refresh_inverse().unwrap();
        let after = m.predict_many(&qs).unwrap();
        for (p, q) in before.iter().zip(&after) {
            assert!((p.mean - q.mean).abs() < 1e-8);
            assert!((p.width - q.width).abs() < 1e-8);
        }
    }

    #[test]
    fn refresh_on_empty_is_noop() {
        let mut m = ModelState::new(gauss(), SimilarityMatrix::identity(1), 1.0).unwrap();
        m.refresh_inverse().unwrap();
        assert!(m.is_empty());
        assert_eq!(m.inverse().nrows(), 0);
    }

    #[test]
    fn scheduled_checkpoints_keep_residual_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut m = ModelState::new(gauss(), random_similarity(&mut rng, 3), 1.0)
            .unwrap()
            .with_refresh(RefreshPolicy { every: Some(512), always: true });
        for _ in 0..2000 {
            let (x, r) = random_obs(&mut rng, 3, 2);
            m.append(x, r).unwrap();
        }
        assert_eq!(m.refresh_count(), 3);
        assert!(m.residual() <= 1e-6);
    }

    #[test]
    fn width_never_increases_after_append() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let mut m = ModelState::new(gauss(), random_similarity(&mut rng, 3), 1.0).unwrap();
            let qs: Vec<_> = (0..4).map(|_| random_obs(&mut rng, 3, 2).0).collect();
            let mut prev = m.predict_many(&qs).unwrap();
            for _ in 0..15 {
                let (x, r) = random_obs(&mut rng, 3, 2);
                m.append(x, r).unwrap();
                let next = m.predict_many(&qs).unwrap();
                for (a, b) in prev.iter().zip(&next) {
                    assert!(b.width <= a.width + 1e-8);
                }
                prev = next;
            }
            // appending the query itself strictly shrinks its width
            let q = qs[0].clone();
            let before = m.predict(&q).unwrap().width;
            m.append(q.clone(), 0.5).unwrap();
            assert!(m.predict(&q).unwrap().width < before);
        }
    }

    #[test]
    fn tiny_lambda_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut m = ModelState::new(gauss(), SimilarityMatrix::identity(1), 1e-8).unwrap();
        let mut obs = Vec::new();
        for i in 0..6 {
            let x = AugmentedContext::new(0, cv(&[i as f64 * 0.3, rng.random::<f64>()]));
            let r = rng.random::<f64>();
            obs.push((x.clone(), r));
            m.append(x, r).unwrap();
        }
        for (x, r) in &obs {
            assert!((m.predict(x).unwrap().mean - r).abs() < 1e-3);
        }
    }

    #[test]
    fn identity_similarity_ignores_other_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let obs: Vec<_> = (0..40).map(|_| random_obs(&mut rng, 3, 2)).collect();
        let mut joint = ModelState::new(gauss(), SimilarityMatrix::identity(3), 1.0).unwrap();
        let mut solo = ModelState::new(gauss(), SimilarityMatrix::identity(3), 1.0).unwrap();
        for (x, r) in &obs {
            joint.append(x.clone(), *r).unwrap();
            if x.task == 1 {
                solo.append(x.clone(), *r).unwrap();
            }
        }
        for _ in 0..10 {
            let q = AugmentedContext::new(1, cv(&[rng.random(), rng.random()]));
            let a = joint.predict(&q).unwrap();
            let b = solo.predict(&q).unwrap();
            assert!((a.mean - b.mean).abs() < 1e-10);
            assert!((a.width - b.width).abs() < 1e-10);
        }
    }

    #[test]
    fn set_similarity_refactorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut m = ModelState::new(gauss(), SimilarityMatrix::identity(2), 1.0).unwrap();
        for _ in 0..10 {
            let (x, r) = random_obs(&mut rng, 2, 2);
            m.append(x, r).unwrap();
        }
        m.set_similarity(SimilarityMatrix::uniform(2, 0.7).unwrap()).unwrap();
        assert!(m.residual() < 1e-10);
        m.append(AugmentedContext::new(1, cv(&[0.5, 0.5])), 0.1).unwrap();
        assert!(m.set_similarity(SimilarityMatrix::identity(1)).is_err());
    }

    #[test]
    fn krr_one_point_halves_target() {
        let x = vec![0.1, 0.2];
        let out = fit_predict_batch(&[(x.clone(), 0.6)], &[x], &gauss(), 1.0).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn krr_large_lambda_shrinks_to_zero() {
        let train = vec![(vec![0.0], 1.0), (vec![1.0], 0.5)];
        let out = fit_predict_batch(&train, &[vec![0.5], vec![0.0]], &gauss(), 1e12).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn krr_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let train: Vec<(Vec<f64>, f64)> = (0..5)
            .map(|_| (vec![rng.random(), rng.random()], rng.random()))
            .collect();
        let test: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random(), rng.random()]).collect();
        let spec = gauss();
        let got = fit_predict_batch(&train, &test, &spec, 0.3).unwrap();
        // oracle: explicit inverse via LU
        let mut k = DMatrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                k[(i, j)] = spec.eval_unchecked(&train[i].0, &train[j].0);
            }
            k[(i, i)] += 0.3;
        }
        let kinv = LU::new(k).try_inverse().unwrap();
        let y = DVector::from_iterator(5, train.iter().map(|t| t.1));
        for (t, g) in test.iter().zip(&got) {
            let kv = DVector::from_iterator(5, train.iter().map(|(x, _)| spec.eval_unchecked(x, t)));
            assert!((kv.dot(&(&kinv * &y)) - g).abs() < 1e-10);
        }
    }

    #[test]
    fn krr_errors() {
        let spec = gauss();
        assert!(fit_predict_batch::<Vec<f64>, Vec<f64>>(&[], &[vec![0.0]], &spec, 1.0).is_err());
        assert!(fit_predict_batch(&[(vec![0.0], 1.0)], &[vec![0.0, 1.0]], &spec, 1.0).is_err());
        assert!(fit_predict_batch(&[(vec![0.0], 1.0)], &[vec![0.0]], &spec, 0.0).is_err());
    }
}
