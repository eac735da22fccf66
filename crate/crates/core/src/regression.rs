//! Kernel regression `f(x) = k(x)ᵀ (H + ρI)⁻¹ Y` with one-hot-style targets.

use log::warn;
use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};
use crate::kernel_matrix::KernelMatrix;

/// Off-class target value; the true class gets `1 + OFF_CLASS`.
pub const OFF_CLASS: f64 = -0.1;

/// Row `i` is `-0.1` everywhere except `0.9` at `labels[i]`.
pub fn encode_labels(labels: &[usize], k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("class count must be >= 1".into()));
    }
    let mut y = DMatrix::from_element(labels.len(), k, OFF_CLASS);
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidArgument(format!("label {c} out of range for {k} classes")));
        }
        y[(i, c)] += 1.0;
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Cholesky,
    LeastSquares,
}

#[derive(Debug, Clone)]
pub struct FittedPredictor {
    alpha: DMatrix<f64>,
    ridge: f64,
    method: SolveMethod,
}

/// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-12;

pub fn fit(h: &KernelMatrix, y: &DMatrix<f64>, ridge: f64) -> Result<FittedPredictor> {
    fit_entries(h.entries(), y, ridge)
}

pub fn fit_entries(h: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<FittedPredictor> {
    let n = h.nrows();
    if h.ncols() != n || y.nrows() != n {
        return Err(Error::Shape(format!(
            "kernel is {}x{} but targets have {} rows",
            h.nrows(),
            h.ncols(),
            y.nrows()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let a = h + DMatrix::identity(n, n) * ridge;
    if let Some(chol) = a.clone().cholesky() {
        let alpha = chol.solve(y);
        if alpha.iter().all(|v| v.is_finite()) {
            return Ok(FittedPredictor {
                alpha,
                ridge,
                method: SolveMethod::Cholesky,
            });
        }
    }
    let svd = SVD::new(a, true, true);
    let smax = svd.singular_values.max();
    let tol = RANK_TOL * smax.max(f64::MIN_POSITIVE) * n as f64;
    let rank = svd.rank(tol);
    if rank < n {
        return Err(Error::RankDeficient { rank, n });
    }
    warn!("cholesky factorization failed; falling back to an SVD least-squares solve");
    let alpha = svd.solve(y, tol).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(FittedPredictor {
        alpha,
        ridge,
        method: SolveMethod::LeastSquares,
    })
}

impl FittedPredictor {
    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn method(&self) -> SolveMethod {
        self.method
    }

    pub fn n_train(&self) -> usize {
        self.alpha.nrows()
    }

    /// `k_rowᵀ alpha`, one score per class.
    pub fn predict(&self, k_row: &[f64]) -> Result<Vec<f64>> {
        if k_row.len() != self.alpha.nrows() {
            return Err(Error::Shape(format!(
                "kernel row has {} entries, predictor was fit on {}",
                k_row.len(),
                self.alpha.nrows()
            )));
        }
        let k = DVector::from_column_slice(k_row);
        Ok((self.alpha.transpose() * k).iter().copied().collect())
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

/// Argmax; ties go to the lowest index.
pub fn classify(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("cannot classify an empty score vector".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predictions.len() as f64)
}
