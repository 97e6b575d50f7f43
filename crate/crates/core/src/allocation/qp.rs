//! Quadratic allocators on the budget simplex with box bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Bounds, CovEstimate, WeightVector};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::sensitivity_geometry::DistanceMatrix;

pub const QP_TOL: f64 = 1e-10;
pub const QP_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    /// `‖w − Π(w − ∇f(w))‖∞`; zero exactly at a KKT point.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn objective(m: &DMatrix<f64>, c: &[f64], w: &DVector<f64>) -> f64 {
    w.dot(&(m * w)) + c.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>()
}

fn gradient(m: &DMatrix<f64>, c: &[f64], w: &DVector<f64>) -> DVector<f64> {
    let mut g = m * w * 2.0;
    for (gi, ci) in g.iter_mut().zip(c) {
        *gi += ci;
    }
    g
}

fn project(bounds: &Bounds, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(bounds.project(v.as_slice()))
}

fn kkt_residual(m: &DMatrix<f64>, c: &[f64], bounds: &Bounds, w: &DVector<f64>) -> f64 {
    let g = gradient(m, c, w);
    (w - project(bounds, &(w - g))).amax()
}

/// Minimise `wᵀMw + cᵀw` subject to `Σw = 1` and the bounds.
///
/// Without finite bounds the KKT system is solved directly; otherwise an
/// accelerated projected gradient with adaptive restart runs until the KKT
/// residual drops below `tol` or `max_iter` is reached.
pub fn solve_qp(m: &DMatrix<f64>, c: Option<&[f64]>, bounds: &Bounds, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let n = m.nrows();
    if m.ncols() != n || n == 0 {
        return Err(Error::ShapeMismatch(format!("QP matrix is {:?}", m.shape())));
    }
    let zeros = vec![0.0; n];
    let c = c.unwrap_or(&zeros);
    if c.len() != n {
        return Err(Error::ShapeMismatch(format!("linear term has {} entries, expected {n}", c.len())));
    }
    bounds.check(n)?;
    if bounds.is_unbounded() {
        // [2M 1; 1ᵀ 0] [w; ν] = [−c; 1]
        let mut k = DMatrix::zeros(n + 1, n + 1);
        k.view_mut((0, 0), (n, n)).copy_from(&(m * 2.0));
        for i in 0..n {
            k[(i, n)] = 1.0;
            k[(n, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(n + 1);
        for i in 0..n {
            rhs[i] = -c[i];
        }
        rhs[n] = 1.0;
        let sol = k.lu().solve(&rhs).ok_or(Error::SingularMatrix)?;
        let w = DVector::from_iterator(n, sol.iter().take(n).copied());
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularMatrix);
        }
        let g = gradient(m, c, &w);
        let mean_g = g.mean();
        return Ok(QpSolution {
            objective: objective(m, c, &w),
            kkt_residual: g.iter().map(|x| (x - mean_g).abs()).fold(0.0, f64::max),
            weights: w.iter().copied().collect(),
            iterations: 1,
            converged: true,
        });
    }

    let eig = sym_eigen(m)?;
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let cscale = c.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let lip = (2.0 * lmax).max(1e-8 * (1.0 + cscale));
    let step = 1.0 / lip;

    let mut w = project(bounds, &DVector::from_element(n, 1.0 / n as f64));
    let mut y = w.clone();
    let mut t = 1.0f64;
    let mut f_w = objective(m, c, &w);
    let mut residual = kkt_residual(m, c, bounds, &w);
    let mut it = 0;
    while it < max_iter && residual > tol {
        it += 1;
        let next = project(bounds, &(&y - gradient(m, c, &y) * step));
        let f_next = objective(m, c, &next);
        if f_next > f_w {
            // Adaptive restart: drop momentum and take a plain projected step from w.
            t = 1.0;
            let plain = project(bounds, &(&w - gradient(m, c, &w) * step));
            f_w = objective(m, c, &plain);
            y = plain.clone();
            w = plain;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &w) * ((t - 1.0) / t_next);
            t = t_next;
            w = next;
            f_w = f_next;
        }
        if it % 10 == 0 || it == max_iter {
            residual = kkt_residual(m, c, bounds, &w);
        }
    }
    residual = kkt_residual(m, c, bounds, &w);
    Ok(QpSolution {
        objective: objective(m, c, &w),
        kkt_residual: residual,
        weights: w.iter().copied().collect(),
        iterations: it,
        converged: residual <= tol,
    })
}

fn solve_default(m: &DMatrix<f64>, c: Option<&[f64]>, bounds: &Bounds) -> Result<QpSolution> {
    solve_qp(m, c, bounds, QP_TOL, QP_MAX_ITER)
}

/// `min wᵀ(Σ + λD)w` (or `wᵀDw` without a covariance) on the bounded simplex.
pub fn qp_distance_weights(
    d: &DistanceMatrix,
    bounds: &Bounds,
    lambda: f64,
    cov: Option<&CovEstimate>,
) -> Result<(WeightVector, QpSolution)> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda must be non-negative, got {lambda}")));
    }
    let m = match cov {
        Some(c) => {
            if c.names != d.names {
                return Err(Error::ShapeMismatch("covariance and distance cover different assets".into()));
            }
            &c.matrix + &d.values * lambda
        }
        None => d.values.clone(),
    };
    let sol = solve_default(&m, None, bounds)?;
    let w = WeightVector::new(d.names.clone(), sol.weights.clone(), Some(bounds.clone()))?;
    Ok((w, sol))
}

pub fn min_variance_weights(cov: &CovEstimate, bounds: &Bounds) -> Result<(WeightVector, QpSolution)> {
    let sol = solve_default(&cov.matrix, None, bounds)?;
    Ok((WeightVector::new(cov.names.clone(), sol.weights.clone(), Some(bounds.clone()))?, sol))
}

fn sharpe(cov: &DMatrix<f64>, mu: &[f64], rf: f64, w: &[f64]) -> f64 {
    let wv = DVector::from_column_slice(w);
    let vol = wv.dot(&(cov * &wv)).max(0.0).sqrt();
    let ret: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>() - rf;
    if vol > 0.0 {
        ret / vol
    } else {
        f64::NEG_INFINITY
    }
}

/// Highest Sharpe ratio along the bounded frontier `argmin wᵀΣw − ν μᵀw`, found
/// by a log-spaced sweep over `ν` refined with golden-section search.
pub fn max_sharpe_weights(cov: &CovEstimate, mu: &[f64], rf: f64, bounds: &Bounds) -> Result<(WeightVector, f64)> {
    let n = cov.len();
    if mu.len() != n {
        return Err(Error::ShapeMismatch(format!("{} expected returns for {n} assets", mu.len())));
    }
    let scale = (cov.matrix.trace() / n as f64) / mu.iter().fold(1e-300f64, |a, x| a.max(x.abs()));
    let frontier = |log_nu: f64| -> Result<(Vec<f64>, f64)> {
        let nu = scale * 10f64.powf(log_nu);
        let c: Vec<f64> = mu.iter().map(|m| -nu * (m - rf)).collect();
        let sol = solve_default(&cov.matrix, Some(&c), bounds)?;
        let s = sharpe(&cov.matrix, mu, rf, &sol.weights);
        Ok((sol.weights, s))
    };
    let grid: Vec<f64> = (0..=40).map(|k| -4.0 + 0.2 * k as f64).collect();
    let mut evals = Vec::with_capacity(grid.len());
    for &g in &grid {
        evals.push(frontier(g)?);
    }
    let best = (0..grid.len()).max_by(|&a, &b| evals[a].1.total_cmp(&evals[b].1)).unwrap_or(0);
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let mut best_pt = evals[best].clone();
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..40 {
        let x1 = hi - phi * (hi - lo);
        let x2 = lo + phi * (hi - lo);
        let (e1, e2) = (frontier(x1)?, frontier(x2)?);
        if e1.1 >= e2.1 {
            hi = x2;
            if e1.1 > best_pt.1 {
                best_pt = e1;
            }
        } else {
            lo = x1;
            if e2.1 > best_pt.1 {
                best_pt = e2;
            }
        }
    }
    let w = WeightVector::new(cov.names.clone(), best_pt.0, Some(bounds.clone()))?;
    Ok((w, best_pt.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseMode {
    #[default]
    Inverse,
    /// Eigen-pseudoinverse with cutoff `1e-10 · max|λ|`.
    Pseudo,
}

/// `w* = D⁻¹1 / (1ᵀD⁻¹1)`; unbounded, weights may be negative.
pub fn closed_form_distance_weights(d: &DistanceMatrix, mode: InverseMode) -> Result<WeightVector> {
    let n = d.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty distance matrix".into()));
    }
    let eig = sym_eigen(&d.values)?;
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let ones = DVector::from_element(n, 1.0);
    let x = match mode {
        InverseMode::Inverse => {
            let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |a, l| a.min(l.abs()));
            if lmax == 0.0 || lmin <= 1e-12 * lmax {
                return Err(Error::SingularMatrix);
            }
            d.values.clone().lu().solve(&ones).ok_or(Error::SingularMatrix)?
        }
        InverseMode::Pseudo => {
            let cut = 1e-10 * lmax;
            let mut x = DVector::zeros(n);
            for (k, &l) in eig.eigenvalues.iter().enumerate() {
                if l.abs() > cut {
                    let q = eig.eigenvectors.column(k);
                    x += q * (q.sum() / l);
                }
            }
            x
        }
    };
    let s = x.sum();
    if !s.is_finite() || s.abs() <= 1e-14 * x.amax().max(1.0) {
        return Err(Error::SingularMatrix);
    }
    WeightVector::new(d.names.clone(), (x / s).iter().copied().collect(), None)
}

/// `D + λI`.
pub fn regularize_distance(d: &DistanceMatrix, lambda: f64) -> Result<DistanceMatrix> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("regularization must be positive, got {lambda}")));
    }
    let n = d.len();
    Ok(DistanceMatrix { values: &d.values + DMatrix::identity(n, n) * lambda, psd_repaired: false, ..d.clone() })
}
