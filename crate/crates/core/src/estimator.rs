//! Cross-sectional conditional-expectation estimator: least-squares
//! regression on polynomial features of the time-t state, in the style of
//! Longstaff and Schwartz.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    /// Plain cross-sectional mean; exact when the target is deterministic.
    Mean,
    /// Affine regression; exact when the target is affine in the features.
    Linear,
    /// Adds all degree-2 monomials of the features.
    Quadratic,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CondEstimator {
    pub mode: EstimatorMode,
    pub ridge: f64,
}

impl Default for CondEstimator {
    fn default() -> Self {
        CondEstimator { mode: EstimatorMode::Linear, ridge: 1e-8 }
    }
}

impl CondEstimator {
    pub fn new(mode: EstimatorMode) -> Self {
        CondEstimator { mode, ridge: 1e-8 }
    }

    fn n_basis(&self, d: usize) -> usize {
        match self.mode {
            EstimatorMode::Mean => 1,
            EstimatorMode::Linear => 1 + d,
            EstimatorMode::Quadratic => 1 + d + d * (d + 1) / 2,
        }
    }

    fn row(&self, feat: &DVector<f64>) -> DVector<f64> {
        let d = feat.len();
        let mut r = DVector::zeros(self.n_basis(d));
        r[0] = 1.0;
        if self.mode == EstimatorMode::Mean {
            return r;
        }
        for j in 0..d {
            r[1 + j] = feat[j];
        }
        if self.mode == EstimatorMode::Quadratic {
            let mut k = 1 + d;
            for i in 0..d {
                for j in i..d {
                    r[k] = feat[i] * feat[j];
                    k += 1;
                }
            }
        }
        r
    }

    /// Fitted conditional expectations of one or more target columns given
    /// per-sample features. Columns share the factorized normal equations.
    /// The intercept is not penalized, so fitted values preserve the sample
    /// mean of each column exactly.
    pub fn fit_predict_cols(
        &self,
        features: &[DVector<f64>],
        targets: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = features.len();
        if targets.nrows() != n {
            return Err(Error::Dimension("one target row per sample required".into()));
        }
        if n == 0 {
            return Err(Error::Precondition("estimator needs at least one sample".into()));
        }
        let d = features[0].len();
        let p = self.n_basis(d);
        let mut x = DMatrix::zeros(n, p);
        for (i, f) in features.iter().enumerate() {
            if f.len() != d {
                return Err(Error::Dimension("inconsistent feature dimension".into()));
            }
            x.row_mut(i).copy_from(&self.row(f).transpose());
        }
        let mut gram = x.transpose() * &x;
        for j in 1..p {
            gram[(j, j)] += self.ridge * n as f64;
        }
        let rhs = x.transpose() * targets;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("regression normal equations are singular".into()))?;
        let beta = chol.solve(&rhs);
        Ok(&x * beta)
    }

    pub fn fit_predict(&self, features: &[DVector<f64>], target: &[f64]) -> Result<Vec<f64>> {
        let t = DMatrix::from_column_slice(target.len(), 1, target);
        let fitted = self.fit_predict_cols(features, &t)?;
        Ok(fitted.column(0).iter().cloned().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(n: usize, d: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn linear_mode_exact_on_affine_targets() {
        let f = feats(200, 3, 1);
        let y: Vec<f64> = f.iter().map(|v| 2.0 - v[0] + 3.0 * v[2]).collect();
        let est = CondEstimator::new(EstimatorMode::Linear);
        let fit = est.fit_predict(&f, &y).unwrap();
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn quadratic_mode_exact_on_quadratics() {
        let f = feats(300, 2, 2);
        let y: Vec<f64> = f.iter().map(|v| 1.0 + v[0] * v[1] - 0.5 * v[1] * v[1]).collect();
        let est = CondEstimator::new(EstimatorMode::Quadratic);
        let fit = est.fit_predict(&f, &y).unwrap();
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn fitted_values_preserve_sample_mean() {
        let f = feats(150, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..150).map(|_| rng.gen_range(-5.0..5.0)).collect();
        for mode in [EstimatorMode::Mean, EstimatorMode::Linear, EstimatorMode::Quadratic] {
            let fit = CondEstimator::new(mode).fit_predict(&f, &y).unwrap();
            let m1 = y.iter().sum::<f64>() / y.len() as f64;
            let m2 = fit.iter().sum::<f64>() / fit.len() as f64;
            assert!((m1 - m2).abs() < 1e-9 * (1.0 + m1.abs()), "{mode:?}");
        }
    }

    #[test]
    fn mean_mode_is_the_mean() {
        let f = feats(50, 1, 5);
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let fit = CondEstimator::new(EstimatorMode::Mean).fit_predict(&f, &y).unwrap();
        for v in &fit {
            assert!((v - 24.5).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_features_survive_via_ridge() {
        // duplicated feature column: rank-deficient without regularization
        let base = feats(100, 1, 6);
        let f: Vec<DVector<f64>> =
            base.iter().map(|v| DVector::from_vec(vec![v[0], v[0]])).collect();
        let y: Vec<f64> = base.iter().map(|v| 1.0 + v[0]).collect();
        let fit = CondEstimator::new(EstimatorMode::Linear).fit_predict(&f, &y).unwrap();
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
