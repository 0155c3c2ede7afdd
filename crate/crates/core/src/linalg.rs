//! Thin helpers over nalgebra for least-squares work.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("design matrix is rank deficient (condition ratio {0:e})")]
    RankDeficient(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Smallest acceptable eigenvalue ratio of X'X before the design is
/// considered collinear.
pub const RANK_TOL: f64 = 1e-12;

/// Returns `(X'X)^{-1}` after checking the design has full column rank.
pub fn gram_inverse(x: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let k = x.ncols();
    if k == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if x.nrows() < k {
        return Err(LinalgError::RankDeficient(0.0));
    }
    let gram = x.tr_mul(x);
    check_rank(&gram)?;
    gram.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(LinalgError::RankDeficient(0.0))
}

fn check_rank(gram: &DMatrix<f64>) -> Result<(), LinalgError> {
    // Scale columns to unit diagonal so the test is invariant to units.
    let k = gram.ncols();
    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let d = gram[(j, j)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    if scale.contains(&0.0) {
        return Err(LinalgError::RankDeficient(0.0));
    }
    let scaled = DMatrix::from_fn(k, k, |i, j| gram[(i, j)] * scale[i] * scale[j]);
    let eig = scaled.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if ratio < RANK_TOL {
        return Err(LinalgError::RankDeficient(ratio));
    }
    Ok(())
}

/// Least-squares coefficients given a precomputed `(X'X)^{-1}`.
pub fn project(x: &DMatrix<f64>, gram_inv: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    gram_inv * x.tr_mul(y)
}

/// Groups row indices by cluster label, in first-appearance order.
pub fn cluster_index<S: AsRef<str>>(labels: &[S]) -> Vec<Vec<usize>> {
    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        let slot = *seen.entry(l.as_ref().to_string()).or_insert_with(|| {
            order.push(Vec::new());
            order.len() - 1
        });
        order[slot].push(i);
    }
    order
}

/// Cluster-robust sandwich with the CR1 small-sample factor
/// `G/(G-1) · (n-1)/(n-k)`. `k_df` is the parameter count used in the
/// degrees-of-freedom factor (it can exceed `x.ncols()` when fixed effects
/// were swept out).
pub fn cr1(
    x: &DMatrix<f64>,
    resid: &DVector<f64>,
    groups: &[Vec<usize>],
    gram_inv: &DMatrix<f64>,
    k_df: usize,
) -> DMatrix<f64> {
    let n = x.nrows();
    let k = x.ncols();
    let g = groups.len();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    let mut score = DVector::<f64>::zeros(k);
    for rows in groups {
        score.fill(0.0);
        for &i in rows {
            for j in 0..k {
                score[j] += x[(i, j)] * resid[i];
            }
        }
        meat.ger(1.0, &score, &score, 1.0);
    }
    let factor = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k_df as f64));
    let v = gram_inv * meat * gram_inv;
    symmetrize(v * factor)
}

/// HC1 heteroskedasticity-robust covariance, `n/(n-k)` scaled.
pub fn hc1(
    x: &DMatrix<f64>,
    resid: &DVector<f64>,
    gram_inv: &DMatrix<f64>,
    k_df: usize,
) -> DMatrix<f64> {
    let n = x.nrows();
    let k = x.ncols();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let r2 = resid[i] * resid[i];
        for a in 0..k {
            let xa = x[(i, a)] * r2;
            for b in 0..k {
                meat[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    let factor = n as f64 / (n as f64 - k_df as f64);
    symmetrize(gram_inv * meat * gram_inv * factor)
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Dense inverse via LU, used for the small information matrices.
pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    m.clone()
        .try_inverse()
        .ok_or(LinalgError::RankDeficient(0.0))
}
