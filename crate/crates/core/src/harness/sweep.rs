use serde::Serialize;

use super::config::SweepParams;
use crate::envs::{GpSampler, GpTaskSplit};
use crate::error::Result;
use crate::krr::{AugmentedContext, ModelState};
use crate::similarity::SimilarityMatrix;

/// Mean test error at one assumed similarity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub sim_train: f64,
    pub mean_mse: f64,
    /// Standard error of `mean_mse` across draws.
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `mse[i][d]`: error at grid point `i` on draw `d`, averaged over tasks.
    #[serde(skip)]
    pub mse: Vec<Vec<f64>>,
}

impl SweepTable {
    /// Grid point with the lowest mean error (first on ties).
    pub fn argmin(&self) -> &SweepRow {
        let mut best = &self.rows[0];
        for r in &self.rows[1..] {
            if r.mean_mse < best.mean_mse {
                best = r;
            }
        }
        best
    }

    /// Index of the grid point nearest to `sim`.
    pub fn index_of(&self, sim: f64) -> usize {
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if (r.sim_train - sim).abs() < (self.rows[best].sim_train - sim).abs() {
                best = i;
            }
        }
        best
    }

    /// Mean and standard error of the per-draw difference `mse[b] − mse[a]`.
    pub fn paired_gap(&self, a: usize, b: usize) -> (f64, f64) {
        let diffs: Vec<f64> = self.mse[b].iter().zip(&self.mse[a]).map(|(x, y)| x - y).collect();
        mean_and_se(&diffs)
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Fits the multi-task regressor on every task's training split with
/// uniform off-diagonal similarity `sim` and returns the test MSE averaged
/// over tasks.
pub fn multitask_mse(splits: &[GpTaskSplit], sim: f64, params: &SweepParams) -> Result<f64> {
    let m = splits.len();
    let similarity = SimilarityMatrix::uniform(m, sim)?;
    let mut model = ModelState::new(params.gp.kernel(), similarity, params.lambda())?;
    let mut train = Vec::new();
    for (task, s) in splits.iter().enumerate() {
        for (x, y) in &s.train.points {
            train.push((AugmentedContext::new(task, x.clone()), *y));
        }
    }
    model.append_batch(&train)?;
    let mut total = 0.0;
    for (task, s) in splits.iter().enumerate() {
        let queries: Vec<AugmentedContext> = s
            .test
            .points
            .iter()
            .map(|(x, _)| AugmentedContext::new(task, x.clone()))
            .collect();
        let preds = model.predict_many(&queries)?;
        let sse: f64 = preds
            .iter()
            .zip(&s.test.points)
            .map(|(p, (_, y))| (p.mean - y).powi(2))
            .sum();
        total += sse / s.test.len() as f64;
    }
    Ok(total / m as f64)
}

/// MSE of the multi-task regressor against the assumed similarity, over
/// `params.draws` resampled targets on a fixed design.
pub fn run_sim_sweep(params: &SweepParams) -> Result<SweepTable> {
    let sampler = GpSampler::new(&params.gp)?;
    let grid = params.grid();
    let mut mse = vec![Vec::with_capacity(params.draws); grid.len()];
    for d in 0..params.draws {
        let splits = sampler.draw(d as u64)?;
        for (i, &sim) in grid.iter().enumerate() {
            mse[i].push(multitask_mse(&splits, sim, params)?);
        }
    }
    let rows = grid
        .iter()
        .zip(&mse)
        .map(|(&sim_train, per_draw)| {
            let (mean_mse, std_err) = mean_and_se(per_draw);
            SweepRow {
                sim_train,
                mean_mse,
                std_err,
            }
        })
        .collect();
    Ok(SweepTable { rows, mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GpRegressionConfig;
    use crate::krr::fit_predict_batch;

    fn small() -> SweepParams {
        SweepParams {
            gp: GpRegressionConfig {
                points_per_task: 30,
                seed: 3,
                ..Default::default()
            },
            draws: 4,
            step: 0.25,
            lambda: None,
        }
    }

    fn ridge_mse(train: &[(Vec<f64>, f64)], test: &crate::similarity::TaskDataset, p: &SweepParams) -> f64 {
        let pred = fit_predict_batch(train, &test.xs(), &p.gp.kernel(), p.lambda()).unwrap();
        pred.iter().zip(test.ys()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / test.len() as f64
    }

    #[test]
    fn zero_similarity_is_independent_ridge() {
        let p = small();
        let splits = GpSampler::new(&p.gp).unwrap().draw(0).unwrap();
        let want: f64 = splits
            .iter()
            .map(|s| {
                let train: Vec<(Vec<f64>, f64)> = s.train.points.iter().map(|(x, y)| (x.to_vec(), *y)).collect();
                ridge_mse(&train, &s.test, &p)
            })
            .sum::<f64>()
            / splits.len() as f64;
        assert!((multitask_mse(&splits, 0.0, &p).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn full_similarity_is_pooled_ridge() {
        let p = small();
        let splits = GpSampler::new(&p.gp).unwrap().draw(1).unwrap();
        let pooled: Vec<(Vec<f64>, f64)> = splits
            .iter()
            .flat_map(|s| s.train.points.iter().map(|(x, y)| (x.to_vec(), *y)))
            .collect();
        let want: f64 = splits.iter().map(|s| ridge_mse(&pooled, &s.test, &p)).sum::<f64>() / splits.len() as f64;
        assert!((multitask_mse(&splits, 1.0, &p).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn table_shape_and_helpers() {
        let t = run_sim_sweep(&small()).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert_eq!(t.mse[0].len(), 4);
        assert_eq!(t.index_of(0.8), 3);
        let (gap, se) = t.paired_gap(2, 2);
        assert_eq!((gap, se), (0.0, 0.0));
        assert!(t.rows.iter().all(|r| r.mean_mse > 0.0 && r.std_err >= 0.0));
    }
}
