//! Small dense linear-algebra and statistics helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with `n - 1` denominator.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Column-wise sample covariance (rows are observations).
pub fn sample_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, k) = x.shape();
    let means: Vec<f64> = (0..k).map(|j| x.column(j).mean()).collect();
    let mut centered = x.clone();
    for j in 0..k {
        for i in 0..t {
            centered[(i, j)] -= means[j];
        }
    }
    let mut cov = centered.transpose() * &centered / (t as f64 - 1.0);
    symmetrize(&mut cov);
    cov
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetric eigendecomposition with a finiteness check.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = m
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or(Error::EigenFailure)?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure);
    }
    Ok(eig)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eigen(m)?.eigenvalues.min())
}

/// Solve the normal equations `(XᵀX + ridge·I) β = Xᵀy` by Cholesky.
///
/// On failure the ridge is raised once to `fallback_ridge` before giving up.
pub fn least_squares(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
    ridge: f64,
    fallback_ridge: f64,
) -> Result<DVector<f64>> {
    let t = DMatrix::from_column_slice(target.len(), 1, target.as_slice());
    let beta = least_squares_multi(design, &t, ridge, fallback_ridge)?;
    Ok(beta.column(0).into_owned())
}

/// Multi-target variant of [`least_squares`]: one coefficient column per target column.
pub fn least_squares_multi(
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    ridge: f64,
    fallback_ridge: f64,
) -> Result<DMatrix<f64>> {
    let gram = design.transpose() * design;
    let rhs = design.transpose() * targets;
    let max_diag = (0..gram.nrows()).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    for r in [ridge, fallback_ridge] {
        let mut g = gram.clone();
        for i in 0..g.nrows() {
            g[(i, i)] += r;
        }
        if let Some(ch) = Cholesky::new(g) {
            // A tiny pivot relative to the largest diagonal means the design is
            // numerically rank deficient even though the factorization succeeded.
            let l = ch.l_dirty();
            let min_pivot = (0..l.nrows()).map(|i| l[(i, i)].powi(2)).fold(f64::INFINITY, f64::min);
            if min_pivot > 1e-13 * max_diag.max(1e-300) {
                let beta = ch.solve(&rhs);
                if beta.iter().all(|b| b.is_finite()) {
                    return Ok(beta);
                }
            }
        }
    }
    Err(Error::RankDeficient)
}

/// Design matrix `[1, X]` with an intercept column.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, k) = x.shape();
    DMatrix::from_fn(t, k + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Quantile with linear interpolation between order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_recovers_exact_coefficients() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let b = least_squares(&x, &y, 0.0, 1e-10).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(least_squares(&x, &y, 0.0, 0.0), Err(Error::RankDeficient)));
    }

    #[test]
    fn pearson_of_constant_is_none() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap();
        assert!(r > 0.99 && r <= 1.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
