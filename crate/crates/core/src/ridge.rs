//! Ridge regression with standardized columns, unpenalized intercept and
//! k-fold cross-validated penalty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::stats;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    pub intercept: f64,
    /// Slopes on the original column scale.
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub train_mse: f64,
    /// `(lambda, cross-validated mse)` for every grid point.
    pub cv_curve: Vec<(f64, f64)>,
}

impl RidgeFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum::<f64>()
    }
}

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_GRID_SIZE: usize = 30;

/// Log-spaced grid over `[1e-4, 1e2] * var(y)`.
pub fn default_grid(outcome: &[f64]) -> Vec<f64> {
    let v = stats::variance(outcome).max(1e-12);
    (0..DEFAULT_GRID_SIZE)
        .map(|i| v * 10f64.powf(-4.0 + 6.0 * i as f64 / (DEFAULT_GRID_SIZE - 1) as f64))
        .collect()
}

fn check(rows: &[Vec<f64>], outcome: &[f64]) -> Result<usize> {
    if rows.len() < 2 || rows.len() != outcome.len() {
        return Err(Error::InsufficientData("ridge needs at least two rows and one outcome per row".into()));
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p || r.iter().any(|x| !x.is_finite())) || outcome.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidArgument("ridge inputs must be finite and rectangular".into()));
    }
    Ok(p)
}

/// Ridge fit at a fixed penalty on standardized columns.
pub fn ridge_fixed(rows: &[Vec<f64>], outcome: &[f64], lambda: f64) -> Result<RidgeFit> {
    let p = check(rows, outcome)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument("ridge penalty must be nonnegative".into()));
    }
    let n = rows.len();
    let ybar = stats::mean(outcome);
    let means: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let sds: Vec<f64> = (0..p)
        .map(|j| (rows.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    let live: Vec<usize> = (0..p).filter(|&j| sds[j] > 1e-12 * (1.0 + means[j].abs())).collect();
    let mut coefficients = vec![0.0; p];
    let constant = outcome.iter().all(|&y| y == outcome[0]);
    if !live.is_empty() && !constant {
        let z = DMatrix::from_fn(n, live.len(), |i, c| (rows[i][live[c]] - means[live[c]]) / sds[live[c]]);
        let yc = DVector::from_fn(n, |i, _| outcome[i] - ybar);
        let mut gram = z.transpose() * &z;
        for d in 0..live.len() {
            gram[(d, d)] += lambda;
        }
        let rhs = z.transpose() * yc;
        let beta = gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::InvalidArgument(format!("ridge normal equations: {e}")))?;
        for (c, &j) in live.iter().enumerate() {
            coefficients[j] = beta[c] / sds[j];
        }
    }
    let intercept = ybar - coefficients.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    let mut fit = RidgeFit {
        intercept,
        coefficients,
        lambda,
        train_mse: 0.0,
        cv_curve: Vec::new(),
    };
    fit.train_mse = rows.iter().zip(outcome).map(|(r, y)| (y - fit.predict(r)).powi(2)).sum::<f64>() / n as f64;
    Ok(fit)
}

fn cv_mse(rows: &[Vec<f64>], outcome: &[f64], lambda: f64, folds: usize) -> Result<f64> {
    let n = rows.len();
    let mut sse = 0.0;
    for f in 0..folds {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % folds != f);
        if train.len() < 2 || test.is_empty() {
            continue;
        }
        let tr: Vec<Vec<f64>> = train.iter().map(|&i| rows[i].clone()).collect();
        let ty: Vec<f64> = train.iter().map(|&i| outcome[i]).collect();
        let fit = ridge_fixed(&tr, &ty, lambda)?;
        sse += test.iter().map(|&i| (outcome[i] - fit.predict(&rows[i])).powi(2)).sum::<f64>();
    }
    Ok(sse / n as f64)
}

/// Ridge fit with the penalty chosen by `folds`-fold cross-validation
/// (fold of row `i` is `i % folds`). `grid = None` uses [`default_grid`].
pub fn ridge_fit(rows: &[Vec<f64>], outcome: &[f64], grid: Option<&[f64]>, folds: usize) -> Result<RidgeFit> {
    check(rows, outcome)?;
    let grid = grid.map(<[f64]>::to_vec).unwrap_or_else(|| default_grid(outcome));
    if grid.is_empty() || folds < 2 {
        return Err(Error::InvalidArgument("ridge needs a nonempty grid and at least two folds".into()));
    }
    let folds = folds.min(rows.len());
    #[cfg(feature = "parallel")]
    let curve: Result<Vec<(f64, f64)>> = {
        use rayon::prelude::*;
        grid.par_iter().map(|&l| cv_mse(rows, outcome, l, folds).map(|m| (l, m))).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let curve: Result<Vec<(f64, f64)>> = grid.iter().map(|&l| cv_mse(rows, outcome, l, folds).map(|m| (l, m))).collect();
    let curve = curve?;
    let best = curve.iter().fold(curve[0], |b, &c| if c.1 < b.1 { c } else { b });
    let mut fit = ridge_fixed(rows, outcome, best.0)?;
    fit.cv_curve = curve;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_penalty_interpolates_square_system() {
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 3.0]];
        // y = 1 + 2 x1 - x2
        let y: Vec<f64> = rows.iter().map(|r| 1.0 + 2.0 * r[0] - r[1]).collect();
        let f = ridge_fixed(&rows, &y, 0.0).unwrap();
        assert!((f.intercept - 1.0).abs() < 1e-10);
        assert!((f.coefficients[0] - 2.0).abs() < 1e-10 && (f.coefficients[1] + 1.0).abs() < 1e-10);
        assert!(f.train_mse < 1e-20);
    }

    #[test]
    fn huge_penalty_shrinks_to_mean() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 3.0 * i as f64 + 1.0).collect();
        let f = ridge_fixed(&rows, &y, 1e14).unwrap();
        assert!(f.coefficients.iter().all(|b| b.abs() < 1e-9));
        assert!((f.intercept - stats::mean(&y)).abs() < 1e-6);
    }

    #[test]
    fn constant_outcome() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let f = ridge_fit(&rows, &[4.0; 6], None, 5).unwrap();
        assert_eq!(f.coefficients, vec![0.0]);
        assert_eq!(f.intercept, 4.0);
    }

    #[test]
    fn matches_closed_form_on_random_instances() {
        let mut rng = stats::stream_rng(3, 0);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            let lambda = rng.random::<f64>() * 3.0;
            // Oracle: centre, scale by population sd, solve (Z'Z + lI) b = Z'y by Gauss-Jordan.
            let m: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 6.0).collect();
            let s: Vec<f64> = (0..3).map(|j| (rows.iter().map(|r| (r[j] - m[j]).powi(2)).sum::<f64>() / 6.0).sqrt()).collect();
            let ym = y.iter().sum::<f64>() / 6.0;
            let mut a = [[0.0f64; 4]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] = (0..6).map(|k| (rows[k][i] - m[i]) / s[i] * (rows[k][j] - m[j]) / s[j]).sum::<f64>();
                }
                a[i][i] += lambda;
                a[i][3] = (0..6).map(|k| (rows[k][i] - m[i]) / s[i] * (y[k] - ym)).sum::<f64>();
            }
            for c in 0..3 {
                let piv = (c..3).max_by(|&x, &z| a[x][c].abs().total_cmp(&a[z][c].abs())).unwrap();
                a.swap(c, piv);
                for r in 0..3 {
                    if r != c {
                        let f = a[r][c] / a[c][c];
                        for k in 0..4 {
                            a[r][k] -= f * a[c][k];
                        }
                    }
                }
            }
            let beta: Vec<f64> = (0..3).map(|j| a[j][3] / a[j][j] / s[j]).collect();
            let f = ridge_fixed(&rows, &y, lambda).unwrap();
            for j in 0..3 {
                assert!((f.coefficients[j] - beta[j]).abs() < 1e-9);
            }
            let icpt = ym - (0..3).map(|j| beta[j] * m[j]).sum::<f64>();
            assert!((f.intercept - icpt).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_validation_prefers_small_penalty_on_clean_signal() {
        let mut rng = stats::stream_rng(4, 0);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] - r[1] + 0.01 * rng.random::<f64>()).collect();
        let f = ridge_fit(&rows, &y, None, DEFAULT_FOLDS).unwrap();
        assert_eq!(f.cv_curve.len(), DEFAULT_GRID_SIZE);
        assert!(f.lambda < 1e-2 * stats::variance(&y) * 100.0);
        assert!((f.coefficients[0] - 2.0).abs() < 0.05);
    }
}
