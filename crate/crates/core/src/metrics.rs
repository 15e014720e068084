//! Recovery-quality metrics.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Estimated entries with magnitude at or below this count as zero.
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub nmse_d: f64,
    pub nmse_b: f64,
    pub support_errors: usize,
    pub threshold: f64,
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `sum (est - truth)^2 / sum truth^2`.
pub fn normalized_mse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_shapes(estimate, truth)?;
    let den = truth.norm_squared();
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok((estimate - truth).norm_squared() / den)
}

/// Entries where exactly one of `|estimate| > threshold` and `truth != 0` holds.
pub fn support_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, threshold: f64) -> Result<usize> {
    check_shapes(estimate, truth)?;
    if !(threshold >= 0.0) {
        return Err(Error::InvalidParameter(format!("threshold = {threshold}")));
    }
    Ok(estimate
        .iter()
        .zip(truth.iter())
        .filter(|(e, t)| (e.abs() > threshold) != (**t != 0.0))
        .count())
}

pub fn evaluate(
    b_hat: &DMatrix<f64>,
    d_hat: &DMatrix<f64>,
    b_truth: &DMatrix<f64>,
    d_truth: &DMatrix<f64>,
    threshold: f64,
) -> Result<EvalReport> {
    Ok(EvalReport {
        nmse_d: normalized_mse(d_hat, d_truth)?,
        nmse_b: normalized_mse(b_hat, b_truth)?,
        support_errors: support_error(d_hat, d_truth, threshold)?,
        threshold,
    })
}
