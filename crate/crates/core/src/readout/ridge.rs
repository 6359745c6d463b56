use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::serde_matrix;
use crate::eval::nrmse;
use crate::{Error, Result};

/// Static linear readout, one weight column per target dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeWeights {
    #[serde(with = "serde_matrix")]
    pub w: DMatrix<f64>,
    pub lambda: f64,
}

/// Default regularization grid: 1e-9, 1e-8, ..., 1e-1.
pub fn default_lambda_grid() -> Vec<f64> {
    (-9..=-1).map(|e| 10f64.powi(e)).collect()
}

fn check_shapes(r: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if r.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "states have {} rows but targets have {}",
            r.nrows(),
            y.nrows()
        )));
    }
    Ok(())
}

/// Solves `(R^T R + lambda I) w = R^T Y` by Cholesky factorization.
pub fn train_ridge(r: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeWeights> {
    check_shapes(r, y)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be a finite non-negative number, got {lambda}"
        )));
    }
    let n = r.ncols();
    let mut a = r.tr_mul(r);
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let chol = a.cholesky().ok_or(Error::RankDeficient { lambda })?;
    // a numerically singular system factors with a vanishing pivot
    let l = chol.l_dirty();
    let min_pivot = (0..n)
        .map(|i| l[(i, i)] * l[(i, i)])
        .fold(f64::INFINITY, f64::min);
    if n > 0 && min_pivot <= 1e-13 * scale {
        return Err(Error::RankDeficient { lambda });
    }
    let w = chol.solve(&r.tr_mul(y));
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient { lambda });
    }
    Ok(RidgeWeights { w, lambda })
}

pub fn predict_ridge(r: &DMatrix<f64>, weights: &RidgeWeights) -> Result<DMatrix<f64>> {
    if r.ncols() != weights.w.nrows() {
        return Err(Error::Shape(format!(
            "states have {} nodes but weights expect {}",
            r.ncols(),
            weights.w.nrows()
        )));
    }
    Ok(r * &weights.w)
}

/// `||Y - R w||^2 + lambda ||w||^2`, summed over target columns.
pub fn ridge_objective(r: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> f64 {
    (y - r * w).norm_squared() + lambda * w.norm_squared()
}

/// Outcome of the validation search over the regularization grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    /// `(lambda, validation NRMSE)` for every grid point that could be solved.
    pub scores: Vec<(f64, f64)>,
}

/// Fits on the leading 90% of the rows for every `lambda` in `grid`, scores
/// on the trailing 10%, then refits on all rows with the winner.
pub fn select_lambda(
    r: &DMatrix<f64>,
    y: &DMatrix<f64>,
    grid: &[f64],
) -> Result<(RidgeWeights, LambdaSearch)> {
    check_shapes(r, y)?;
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let l = r.nrows();
    let n_val = l / 10;
    if n_val < 2 || l - n_val < 1 {
        return Err(Error::Shape(format!(
            "{l} rows are too few for a validation split"
        )));
    }
    let n_fit = l - n_val;
    let (r_fit, y_fit) = (r.rows(0, n_fit).into_owned(), y.rows(0, n_fit).into_owned());
    let (r_val, y_val) = (
        r.rows(n_fit, n_val).into_owned(),
        y.rows(n_fit, n_val).into_owned(),
    );
    let mut scores = Vec::new();
    for &lambda in grid {
        match train_ridge(&r_fit, &y_fit, lambda) {
            Ok(w) => {
                let score = nrmse(&(&r_val * &w.w), &y_val)?;
                scores.push((lambda, score));
            }
            Err(Error::RankDeficient { .. }) => {
                log::debug!("lambda {lambda:e} skipped: system is singular");
            }
            Err(e) => return Err(e),
        }
    }
    let best = scores
        .iter()
        .copied()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::RankDeficient {
            lambda: grid.iter().copied().fold(0.0, f64::max),
        })?;
    let weights = train_ridge(r, y, best.0)?;
    Ok((
        weights,
        LambdaSearch {
            lambda: best.0,
            scores,
        },
    ))
}
