//! Risk and return quantities mapped from driver statistics through sensitivities.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{CovEstimate, WeightVector};
use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, quantile_sorted, sym_eigen};
use crate::par;
use crate::rng::NormalStream;
use crate::sensitivity_models::SensitivityMatrix;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

fn check_driver_cov(s: &SensitivityMatrix, cov: &DMatrix<f64>) -> Result<()> {
    let m = s.drivers.len();
    if cov.shape() != (m, m) {
        return Err(Error::ShapeMismatch(format!("driver covariance is {:?}, expected {m}x{m}", cov.shape())));
    }
    if max_asymmetry(cov) > 1e-12 * (1.0 + cov.amax()) {
        return Err(Error::InvalidInput("driver covariance is not symmetric".into()));
    }
    Ok(())
}

/// `B · E[D]`.
pub fn map_expected_return(s: &SensitivityMatrix, forecast: &[f64]) -> Result<Vec<f64>> {
    check_len("driver forecast", forecast.len(), s.drivers.len())?;
    Ok((&s.values * DVector::from_column_slice(forecast)).iter().copied().collect())
}

/// `B Σ_D Bᵀ + diag(residual)`.
pub fn map_covariance(s: &SensitivityMatrix, driver_cov: &DMatrix<f64>, residual_var: &[f64]) -> Result<CovEstimate> {
    check_driver_cov(s, driver_cov)?;
    check_len("residual variance", residual_var.len(), s.n_assets())?;
    if residual_var.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput("residual variances must be non-negative".into()));
    }
    let mut m = &s.values * driver_cov * s.values.transpose();
    crate::linalg::symmetrize(&mut m);
    for (i, v) in residual_var.iter().enumerate() {
        m[(i, i)] += v;
    }
    CovEstimate::new(s.assets.clone(), m)
}

/// `sqrt(βᵢᵀ Σ_D βᵢ)` per asset.
pub fn map_volatility(s: &SensitivityMatrix, driver_cov: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_driver_cov(s, driver_cov)?;
    (0..s.n_assets())
        .map(|i| {
            let b = s.values.row(i).transpose();
            let q = b.dot(&(driver_cov * &b));
            let scale = b.norm_squared() * driver_cov.amax();
            if q < -1e-12 * scale.max(f64::MIN_POSITIVE) {
                Err(Error::NegativeQuadraticForm)
            } else {
                Ok(q.max(0.0).sqrt())
            }
        })
        .collect()
}

/// `Σᵢ wᵢ ∂Rᵢ/∂D_j · σ_{D_j}` per driver.
pub fn directional_attribution(s: &SensitivityMatrix, w: &WeightVector, driver_vols: &[f64]) -> Result<Vec<f64>> {
    if w.names != s.assets {
        return Err(Error::ShapeMismatch("weights and sensitivities cover different assets".into()));
    }
    check_len("driver vols", driver_vols.len(), s.drivers.len())?;
    let exposure = s.values.transpose() * DVector::from_column_slice(&w.weights);
    Ok(exposure.iter().zip(driver_vols).map(|(e, v)| e * v).collect())
}

/// Asset scenario returns `D Bᵀ` from `T × m` driver scenarios.
pub fn sensitivity_scenarios(s: &SensitivityMatrix, driver_scenarios: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_len("driver scenario columns", driver_scenarios.ncols(), s.drivers.len())?;
    Ok(driver_scenarios * s.values.transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CopulaVar {
    pub var: f64,
    pub cvar: f64,
    pub mean: f64,
    pub std: f64,
    pub n_samples: usize,
}

const CHUNK: usize = 4096;

/// Factor `L` with `L Lᵀ` equal to the eigen-clipped, re-normalised correlation.
fn correlation_factor(corr: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = corr.nrows();
    if corr.ncols() != n {
        return Err(Error::ShapeMismatch(format!("correlation matrix is {:?}", corr.shape())));
    }
    if corr.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) || max_asymmetry(corr) > 1e-9 {
        return Err(Error::NonPsdCorrelation);
    }
    let eig = sym_eigen(corr)?;
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let mut l = &eig.eigenvectors * DMatrix::from_diagonal(&clipped.map(f64::sqrt));
    for i in 0..n {
        let norm = l.row(i).norm();
        if norm < 1e-8 {
            return Err(Error::NonPsdCorrelation);
        }
        l.row_mut(i).scale_mut(1.0 / norm);
    }
    Ok(l)
}

/// Monte Carlo VaR of `Σ wᵢ sᵢ` with `s ~ N(means, diag(stds)·C·diag(stds))`.
/// VaR is the negated `1 − alpha` quantile of the sampled portfolio values.
pub fn copula_var(
    means: &[f64],
    stds: &[f64],
    corr: &DMatrix<f64>,
    weights: &[f64],
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> Result<CopulaVar> {
    let n = means.len();
    check_len("stds", stds.len(), n)?;
    check_len("weights", weights.len(), n)?;
    check_len("correlation", corr.nrows(), n)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be positive".into()));
    }
    if stds.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidInput("standard deviations must be non-negative".into()));
    }
    let l = correlation_factor(corr)?;
    let scaled = DVector::from_iterator(n, weights.iter().zip(stds).map(|(w, s)| w * s));
    let load: Vec<f64> = (l.transpose() * scaled).iter().copied().collect();
    let centre: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
    let chunks = n_samples.div_ceil(CHUNK);
    let parts = par::map_range(chunks, |c| {
        let len = CHUNK.min(n_samples - c * CHUNK);
        let mut rng = NormalStream::new(seed, c as u64);
        (0..len).map(|_| centre + load.iter().map(|a| a * rng.normal()).sum::<f64>()).collect::<Vec<f64>>()
    });
    let mut samples: Vec<f64> = parts.into_iter().flatten().collect();
    samples.sort_by(f64::total_cmp);
    let q = quantile_sorted(&samples, 1.0 - alpha);
    let tail: Vec<f64> = samples.iter().copied().filter(|x| *x <= q).collect();
    let mean = samples.iter().sum::<f64>() / n_samples as f64;
    let var_s = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_samples.max(2) - 1) as f64;
    Ok(CopulaVar {
        var: -q + 0.0,
        cvar: -tail.iter().sum::<f64>() / tail.len().max(1) as f64 + 0.0,
        mean,
        std: var_s.sqrt(),
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NormalStream;

    fn sens(values: DMatrix<f64>) -> SensitivityMatrix {
        let assets = (0..values.nrows()).map(|i| format!("A{i}")).collect();
        let drivers = (0..values.ncols()).map(|j| format!("D{j}")).collect();
        SensitivityMatrix::new(assets, drivers, values).unwrap()
    }

    fn random(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut s = NormalStream::new(seed, 0);
        DMatrix::from_fn(r, c, |_, _| s.normal())
    }

    #[test]
    fn expected_return_cases() {
        let s = sens(random(1, 5, 3));
        assert_eq!(map_expected_return(&s, &[0.0; 3]).unwrap(), vec![0.0; 5]);
        let id = sens(DMatrix::identity(3, 3));
        assert_eq!(map_expected_return(&id, &[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        let f = [0.3, -0.2, 0.7];
        let got = map_expected_return(&s, &f).unwrap();
        for i in 0..5 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += s.values[(i, j)] * f[j];
            }
            assert!((got[i] - acc).abs() < 1e-12);
        }
        assert!(matches!(map_expected_return(&s, &[1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn covariance_cases() {
        let s = sens(random(2, 6, 2));
        let gram = map_covariance(&s, &DMatrix::identity(2, 2), &[0.0; 6]).unwrap();
        assert!((&gram.matrix - &s.values * s.values.transpose()).amax() < 1e-12);
        let z = sens(DMatrix::zeros(3, 2));
        let d = map_covariance(&z, &DMatrix::identity(2, 2), &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(d.matrix, DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2, 0.3])));
        let a = random(3, 2, 2);
        let dc = &a * a.transpose();
        let c = map_covariance(&s, &dc, &[0.01; 6]).unwrap();
        assert!(crate::linalg::min_eigenvalue(&c.matrix).unwrap() >= -1e-10);
        // Low rank: B Σ_D Bᵀ has at most m non-zero eigenvalues.
        let c0 = map_covariance(&s, &dc, &[0.0; 6]).unwrap();
        let ev = sym_eigen(&c0.matrix).unwrap().eigenvalues;
        let big = ev.iter().filter(|l| l.abs() > 1e-10 * ev.amax()).count();
        assert!(big <= 2);
    }

    #[test]
    fn volatility_cases() {
        let e1 = sens(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let dc = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        assert_eq!(map_volatility(&e1, &dc).unwrap(), vec![2.0]);
        assert_eq!(map_volatility(&sens(DMatrix::zeros(1, 2)), &dc).unwrap(), vec![0.0]);
        let s = sens(random(4, 5, 2));
        let a = random(5, 2, 2);
        let dc = &a * a.transpose();
        let vols = map_volatility(&s, &dc).unwrap();
        let cov = map_covariance(&s, &dc, &[0.0; 5]).unwrap();
        for i in 0..5 {
            assert!((vols[i] - cov.matrix[(i, i)].sqrt()).abs() < 1e-12);
        }
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            map_volatility(&sens(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])), &bad),
            Err(Error::NegativeQuadraticForm)
        ));
    }

    #[test]
    fn attribution_cases() {
        let s = sens(random(6, 4, 3));
        let vols = [0.1, 0.2, 0.3];
        let e1 = WeightVector::new(s.assets.clone(), vec![1.0, 0.0, 0.0, 0.0], None).unwrap();
        let got = directional_attribution(&s, &e1, &vols).unwrap();
        for j in 0..3 {
            assert!((got[j] - s.values[(0, j)] * vols[j]).abs() < 1e-15);
        }
        assert_eq!(directional_attribution(&s, &e1, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let w = WeightVector::new(s.assets.clone(), vec![0.1, 0.2, 0.3, 0.4], None).unwrap();
        let got = directional_attribution(&s, &w, &vols).unwrap();
        for j in 0..3 {
            let mut acc = 0.0;
            for i in 0..4 {
                acc += w.weights[i] * (s.values[(i, j)] * vols[j]);
            }
            assert!((got[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn scenarios_are_products() {
        let s = sens(random(7, 3, 2));
        let d = random(8, 10, 2);
        let sc = sensitivity_scenarios(&s, &d).unwrap();
        assert_eq!(sc.shape(), (10, 3));
        assert!((sc[(4, 1)] - (d[(4, 0)] * s.values[(1, 0)] + d[(4, 1)] * s.values[(1, 1)])).abs() < 1e-15);
    }

    #[test]
    fn copula_single_asset_normal_quantile() {
        let one = DMatrix::identity(1, 1);
        let r = copula_var(&[0.0], &[1.0], &one, &[1.0], 0.95, 200_000, 42).unwrap();
        assert!((r.var - 1.6449).abs() < 0.02, "{}", r.var);
        // Normal expected shortfall φ(z)/(1−α) = 2.0627.
        assert!((r.cvar - 2.0627).abs() < 0.03);
        let z = copula_var(&[0.0], &[1.0], &one, &[0.0], 0.95, 1000, 42).unwrap();
        assert_eq!(z.var, 0.0);
    }

    #[test]
    fn copula_perfect_correlation_collapses() {
        let ones = DMatrix::from_element(2, 2, 1.0);
        let two = copula_var(&[0.0, 0.0], &[1.0, 1.0], &ones, &[0.5, 0.5], 0.95, 200_000, 9).unwrap();
        let one = copula_var(&[0.0], &[1.0], &DMatrix::identity(1, 1), &[1.0], 0.95, 200_000, 10).unwrap();
        assert!((two.var - one.var).abs() < 0.02);
    }

    #[test]
    fn copula_is_deterministic_and_repairs_input() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        let a = copula_var(&[0.01; 3], &[0.1, 0.2, 0.3], &c, &[0.2, 0.3, 0.5], 0.99, 10_000, 1).unwrap();
        let b = copula_var(&[0.01; 3], &[0.1, 0.2, 0.3], &c, &[0.2, 0.3, 0.5], 0.99, 10_000, 1).unwrap();
        assert_eq!(a, b);
        let broken = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(copula_var(&[0.0; 2], &[1.0; 2], &broken, &[0.5; 2], 0.9, 10, 1), Err(Error::NonPsdCorrelation)));
    }
}
