//! Positive-definite kernels on context vectors, Gram matrices and the
//! multi-task product kernel.

use std::ops::Deref;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter added to a Gram diagonal (scaled by the kernel's output scale)
/// before factorizing an unregularized Gram or covariance matrix.
pub const JITTER: f64 = 1e-8;

/// A finite real feature vector attached to one arm in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ContextVector(Vec<f64>);

impl ContextVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context vector"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ContextVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ContextVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ContextVector> for Vec<f64> {
    fn from(c: ContextVector) -> Self {
        c.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Linear,
}

/// Kernel family plus hyperparameters.
///
/// The linear kernel is `output_scale * <x, y>`; the lengthscale is ignored
/// for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub lengthscale: f64,
    #[serde(default = "one")]
    pub output_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn gaussian(lengthscale: f64, output_scale: f64) -> Result<Self> {
        let spec = Self {
            family: KernelFamily::Gaussian,
            lengthscale,
            output_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            lengthscale: 1.0,
            output_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::invalid("output_scale", "must be positive and finite"));
        }
        if self.family == KernelFamily::Gaussian
            && !(self.lengthscale > 0.0 && self.lengthscale.is_finite())
        {
            return Err(Error::invalid("lengthscale", "must be positive and finite"));
        }
        Ok(())
    }

    /// Kernel value on raw slices. Callers guarantee equal lengths.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        match self.family {
            KernelFamily::Gaussian => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                self.output_scale * (-sq / (2.0 * self.lengthscale * self.lengthscale)).exp()
            }
            KernelFamily::Linear => {
                self.output_scale * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
            }
        }
    }

    pub fn jitter(&self) -> f64 {
        JITTER * self.output_scale
    }
}

pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(spec.eval_unchecked(x, y))
}

/// Symmetric matrix of pairwise kernel values together with the kernel that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub kernel: KernelSpec,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.entries)
    }

    /// Minimum eigenvalue is above `-1e-8 * trace / n`.
    pub fn is_psd(&self) -> bool {
        let n = self.len().max(1) as f64;
        self.min_eigenvalue() >= -1e-8 * self.entries.trace().abs() / n
    }
}

pub fn gram<V: AsRef<[f64]>>(spec: &KernelSpec, xs: &[V]) -> Result<GramMatrix> {
    if xs.is_empty() {
        return Err(Error::Empty("gram input"));
    }
    let dim = xs[0].as_ref().len();
    for x in xs {
        if x.as_ref().len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.as_ref().len(),
            });
        }
    }
    Ok(GramMatrix {
        entries: cross_gram(spec, xs, xs),
        kernel: *spec,
    })
}

/// `K[i][j] = k(a_i, b_j)`; dimensions are assumed to agree.
pub(crate) fn cross_gram<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    spec: &KernelSpec,
    a: &[A],
    b: &[B],
) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            k[(i, j)] = spec.eval_unchecked(x.as_ref(), y.as_ref());
        }
    }
    k
}

/// Multi-task kernel value: task factor times context factor.
#[inline]
pub fn product_kernel(kz_value: f64, kx_value: f64) -> f64 {
    kz_value * kx_value
}

/// Median of pairwise Euclidean distances, or 1.0 when that median is zero.
pub fn median_heuristic<V: AsRef<[f64]>>(xs: &[V]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::Empty("median heuristic needs at least two points"));
    }
    let dim = xs[0].as_ref().len();
    let mut dists = Vec::with_capacity(xs.len() * (xs.len() - 1) / 2);
    for i in 0..xs.len() {
        let a = xs[i].as_ref();
        if a.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: a.len(),
            });
        }
        for b in &xs[i + 1..] {
            let b = b.as_ref();
            let sq: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            dists.push(sq.sqrt());
        }
    }
    let m = median(&mut dists);
    Ok(if m > 0.0 { m } else { 1.0 })
}

/// Median with the even-length midpoint convention. Input must be non-empty.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(l: f64) -> KernelSpec {
        KernelSpec::gaussian(l, 1.0).unwrap()
    }

    #[test]
    fn gaussian_self_value_is_output_scale() {
        let spec = KernelSpec::gaussian(0.5, 2.5).unwrap();
        let x = [0.3, -1.2, 7.0];
        assert_eq!(eval_kernel(&spec, &x, &x).unwrap(), 2.5);
        assert_eq!(eval_kernel(&g(0.5), &x, &x).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_unit_distance() {
        let v = eval_kernel(&g(0.5), &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - (-2.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.135335).abs() < 1e-6);
    }

    #[test]
    fn linear_is_dot_product() {
        let v = eval_kernel(&KernelSpec::linear(), &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(v, 11.0);
    }

    #[test]
    fn dimension_mismatch_names_both() {
        let err = eval_kernel(&g(1.0), &[1.0, 2.0], &[1.0]).unwrap_err();
        match err {
            Error::DimensionMismatch { expected, got } => assert_eq!((expected, got), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(KernelSpec::gaussian(0.0, 1.0).is_err());
        assert!(KernelSpec::gaussian(1.0, -1.0).is_err());
        assert!(ContextVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn gram_small_cases() {
        let one = gram(&g(0.5), &[vec![0.2, 0.4]]).unwrap();
        assert_eq!(one.entries, DMatrix::from_element(1, 1, 1.0));
        let two = gram(&g(0.5), &[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(two.entries, DMatrix::from_element(2, 2, 1.0));
        assert!(gram::<Vec<f64>>(&g(0.5), &[]).is_err());
        assert!(gram(&g(0.5), &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn gram_matches_pairwise_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2).map(|_| rng.random::<f64>()).collect())
            .collect();
        let spec = g(0.7);
        let k = gram(&spec, &xs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(k.entries[(i, j)], eval_kernel(&spec, &xs[i], &xs[j]).unwrap());
            }
        }
    }

    #[test]
    fn product_kernel_cases() {
        assert_eq!(product_kernel(1.0, 0.3), 0.3);
        assert_eq!(product_kernel(0.0, 0.9), 0.0);
        assert!((product_kernel(0.8, 0.5) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn median_heuristic_cases() {
        assert_eq!(median_heuristic(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap(), 1.0);
        assert_eq!(median_heuristic(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap(), 2.0);
        assert_eq!(median_heuristic(&[vec![2.0], vec![2.0], vec![2.0]]).unwrap(), 1.0);
        assert!(median_heuristic(&[vec![2.0]]).is_err());
    }

    fn points(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), 1..=n)
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric(x in prop::collection::vec(-5.0f64..5.0, 3),
                               y in prop::collection::vec(-5.0f64..5.0, 3),
                               l in 0.05f64..5.0) {
            let spec = g(l);
            prop_assert_eq!(spec.eval_unchecked(&x, &y), spec.eval_unchecked(&y, &x));
            let lin = KernelSpec::linear();
            prop_assert_eq!(lin.eval_unchecked(&x, &y), lin.eval_unchecked(&y, &x));
        }

        #[test]
        fn gram_is_psd(xs in points(50, 3), l in 0.1f64..3.0) {
            prop_assert!(gram(&g(l), &xs).unwrap().is_psd());
            prop_assert!(gram(&KernelSpec::linear(), &xs).unwrap().is_psd());
        }

        #[test]
        fn hadamard_product_of_grams_is_psd(xs in points(30, 2), zs in points(30, 1)) {
            let n = xs.len().min(zs.len());
            let kx = gram(&g(0.5), &xs[..n]).unwrap();
            let kz = gram(&KernelSpec::linear(), &zs[..n]).unwrap();
            let prod = GramMatrix { entries: kx.entries.component_mul(&kz.entries), kernel: kx.kernel };
            prop_assert!(prod.is_psd());
        }
    }
}
