use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram, KernelSpec};
use crate::similarity::{SimilarityMatrix, TaskDataset};

/// Multi-task regression data drawn from a zero-mean Gaussian with
/// covariance `K_Z ⊗ K_X + σ²I` over a design shared by all tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpRegressionConfig {
    pub tasks: usize,
    pub points_per_task: usize,
    /// Off-diagonal entry of the ground-truth task similarity.
    pub sim_g: f64,
    pub lengthscale: f64,
    pub noise_var: f64,
    pub train_size: usize,
    pub seed: u64,
}

impl Default for GpRegressionConfig {
    fn default() -> Self {
        Self {
            tasks: 2,
            points_per_task: 100,
            sim_g: 0.8,
            lengthscale: 0.5,
            noise_var: 0.05,
            train_size: 5,
            seed: 0,
        }
    }
}

impl GpRegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.points_per_task == 0 {
            return Err(Error::invalid("gp", "tasks and points_per_task must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sim_g) {
            return Err(Error::invalid("sim_g", "must lie in [0, 1]"));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::invalid("noise_var", "must be ≥ 0"));
        }
        if self.train_size == 0 || self.train_size >= self.points_per_task {
            return Err(Error::invalid("train_size", "must be in [1, points_per_task)"));
        }
        KernelSpec::gaussian(self.lengthscale, 1.0).map(|_| ())
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::gaussian(self.lengthscale, 1.0).expect("validated lengthscale")
    }
}

/// One task's train/test split of a draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GpTaskSplit {
    pub train: TaskDataset,
    pub test: TaskDataset,
}

/// Fixed design and covariance factors; each [`draw`](GpSampler::draw)
/// resamples the targets only.
#[derive(Debug, Clone)]
pub struct GpSampler {
    cfg: GpRegressionConfig,
    design: Vec<Vec<f64>>,
    // K_X = F_X F_Xᵀ and K_Z = F_Z F_Zᵀ
    factor_x: DMatrix<f64>,
    factor_z: DMatrix<f64>,
    train_idx: Vec<Vec<usize>>,
}

/// Symmetric square root `V diag(√λ) Vᵀ`-style factor `V diag(√λ)`,
/// clipping roundoff-level negative eigenvalues.
fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-8 * m.trace().abs() / n as f64 {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let mut f = eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    Ok(f)
}

impl GpSampler {
    pub fn new(cfg: &GpRegressionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.points_per_task;
        let design: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let spec = cfg.kernel();
        let mut kx = gram(&spec, &design)?.entries;
        for i in 0..n {
            kx[(i, i)] += spec.jitter();
        }
        let kz = SimilarityMatrix::uniform(cfg.tasks, cfg.sim_g)?;
        let factor_x = psd_factor(&kx)?;
        let factor_z = psd_factor(kz.entries())?;

        let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        split_rng.set_stream(1);
        let train_idx = (0..cfg.tasks)
            .map(|_| {
                let mut idx = rand::seq::index::sample(&mut split_rng, n, cfg.train_size).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            design,
            factor_x,
            factor_z,
            train_idx,
        })
    }

    pub fn design(&self) -> &[Vec<f64>] {
        &self.design
    }

    pub fn train_indices(&self, task: usize) -> &[usize] {
        &self.train_idx[task]
    }

    /// Target values of draw `index`, one vector per task over the full design.
    pub fn sample_targets(&self, index: u64) -> Vec<Vec<f64>> {
        let (n, m) = (self.cfg.points_per_task, self.cfg.tasks);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(2 + index);
        let xi = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        // vec(F_X Ξ F_Zᵀ) = (F_Z ⊗ F_X) vec(Ξ)
        let y = &self.factor_x * xi * self.factor_z.transpose();
        let sd = self.cfg.noise_var.sqrt();
        (0..m)
            .map(|task| {
                y.column(task)
                    .iter()
                    .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    pub fn draw(&self, index: u64) -> Result<Vec<GpTaskSplit>> {
        let targets = self.sample_targets(index);
        targets
            .into_iter()
            .enumerate()
            .map(|(task, ys)| {
                let train_set = &self.train_idx[task];
                let mut train = (Vec::new(), Vec::new());
                let mut test = (Vec::new(), Vec::new());
                for (i, y) in ys.into_iter().enumerate() {
                    let dst = if train_set.binary_search(&i).is_ok() {
                        &mut train
                    } else {
                        &mut test
                    };
                    dst.0.push(self.design[i].clone());
                    dst.1.push(y);
                }
                Ok(GpTaskSplit {
                    train: TaskDataset::from_pairs(train.0, train.1)?,
                    test: TaskDataset::from_pairs(test.0, test.1)?,
                })
            })
            .collect()
    }
}

/// A single draw of the multi-task regression data, split per task.
pub fn generate_gp_tasks(cfg: &GpRegressionConfig) -> Result<Vec<GpTaskSplit>> {
    GpSampler::new(cfg)?.draw(0)
}
