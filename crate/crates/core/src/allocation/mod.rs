//! Portfolio weights from covariance, distance and scenario inputs.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, min_eigenvalue, sample_covariance};
use crate::market_data::ReturnPanel;

pub mod cvar;
pub mod hierarchical;
pub mod lp;
pub mod mapping;
pub mod qp;

pub use cvar::{cvar_optimize, CvarProblem, CvarSolution};
pub use hierarchical::{hrp_weights, hsp_from_sensitivities, hsp_weights, recursive_bisection, HspConfig, HspResult};
pub use mapping::{
    copula_var, directional_attribution, map_covariance, map_expected_return, map_volatility, sensitivity_scenarios,
    CopulaVar,
};
pub use qp::{
    closed_form_distance_weights, max_sharpe_weights, min_variance_weights, qp_distance_weights, regularize_distance,
    solve_qp, InverseMode, QpSolution,
};

/// Tolerance used when checking the simplex and box constraints of a result.
pub const WEIGHT_TOL: f64 = 1e-9;

/// Per-asset lower and upper weight bounds. Infinite entries mean "unbounded".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Self {
        Self { lower: vec![lower; n], upper: vec![upper; n] }
    }

    pub fn long_only(n: usize) -> Self {
        Self::uniform(n, 0.0, 1.0)
    }

    pub fn unbounded(n: usize) -> Self {
        Self::uniform(n, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|l| *l == f64::NEG_INFINITY) && self.upper.iter().all(|u| *u == f64::INFINITY)
    }

    /// The simplex slice `{Σw = 1, l ≤ w ≤ u}` must be non-empty.
    pub fn check(&self, n: usize) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::ShapeMismatch(format!("bounds for {} assets, expected {n}", self.lower.len())));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return Err(Error::Infeasible("a lower bound exceeds its upper bound".into()));
        }
        let lo: f64 = self.lower.iter().sum();
        let hi: f64 = self.upper.iter().sum();
        if lo > 1.0 + WEIGHT_TOL {
            return Err(Error::Infeasible(format!("lower bounds sum to {lo} > 1")));
        }
        if hi < 1.0 - WEIGHT_TOL {
            return Err(Error::Infeasible(format!("upper bounds sum to {hi} < 1")));
        }
        Ok(())
    }

    /// Euclidean projection onto `{Σw = 1, l ≤ w ≤ u}`: `w_i = clip(v_i − τ, l_i, u_i)`
    /// with `τ` found exactly among the breakpoints of the piecewise-linear sum.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        if self.is_unbounded() {
            let tau = (v.iter().sum::<f64>() - 1.0) / n as f64;
            return v.iter().map(|x| x - tau).collect();
        }
        let clip = |i: usize, tau: f64| (v[i] - tau).max(self.lower[i]).min(self.upper[i]);
        let total = |tau: f64| (0..n).map(|i| clip(i, tau)).sum::<f64>();
        let mut bps: Vec<f64> = (0..n)
            .flat_map(|i| [v[i] - self.upper[i], v[i] - self.lower[i]])
            .filter(|b| b.is_finite())
            .collect();
        bps.sort_by(f64::total_cmp);
        bps.dedup();
        // Σ clip(v − τ) is non-increasing in τ; `k` counts breakpoints where it is still ≥ 1.
        let k = bps.partition_point(|&b| total(b) >= 1.0);
        let (left, right) = (k.checked_sub(1).map(|i| bps[i]), bps.get(k).copied());
        let probe = match (left, right) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (Some(a), None) => a + 1.0,
            (None, Some(b)) => b - 1.0,
            (None, None) => 0.0,
        };
        let free: Vec<usize> = (0..n).filter(|&i| self.lower[i] < v[i] - probe && v[i] - probe < self.upper[i]).collect();
        let tau = if free.is_empty() {
            left.or(right).unwrap_or(0.0)
        } else {
            let clamped: f64 = (0..n).filter(|i| !free.contains(i)).map(|i| clip(i, probe)).sum();
            let t = (free.iter().map(|&i| v[i]).sum::<f64>() + clamped - 1.0) / free.len() as f64;
            t.max(left.unwrap_or(f64::NEG_INFINITY)).min(right.unwrap_or(f64::INFINITY))
        };
        let mut w: Vec<f64> = (0..n).map(|i| clip(i, tau)).collect();
        // Rounding residual goes to coordinates strictly inside their box.
        let resid = 1.0 - w.iter().sum::<f64>();
        let inside: Vec<usize> = (0..n).filter(|&i| w[i] > self.lower[i] && w[i] < self.upper[i]).collect();
        if !inside.is_empty() {
            let share = resid / inside.len() as f64;
            for i in inside {
                w[i] = (w[i] + share).max(self.lower[i]).min(self.upper[i]);
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub bounds: Option<Bounds>,
}

impl WeightVector {
    pub fn new(names: Vec<String>, weights: Vec<f64>, bounds: Option<Bounds>) -> Result<Self> {
        if names.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!("{} names for {} weights", names.len(), weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("non-finite weight".into()));
        }
        Ok(Self { names, weights, bounds })
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Sum to one and (when bounds are set) box membership, both within [`WEIGHT_TOL`].
    pub fn is_valid(&self) -> bool {
        if (self.sum() - 1.0).abs() > WEIGHT_TOL {
            return false;
        }
        match &self.bounds {
            Some(b) => self
                .weights
                .iter()
                .zip(b.lower.iter().zip(&b.upper))
                .all(|(w, (l, u))| *w >= l - WEIGHT_TOL && *w <= u + WEIGHT_TOL),
            None => true,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.weights[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate {
    pub names: Vec<String>,
    pub matrix: DMatrix<f64>,
    pub window: Option<(NaiveDate, NaiveDate)>,
}

impl CovEstimate {
    /// Symmetric to 1e-12 and PSD within -1e-10 (both relative to the largest entry).
    pub fn new(names: Vec<String>, matrix: DMatrix<f64>) -> Result<Self> {
        let n = names.len();
        if matrix.shape() != (n, n) {
            return Err(Error::ShapeMismatch(format!("{n} names, covariance {:?}", matrix.shape())));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariance has non-finite entries".into()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        if max_asymmetry(&matrix) > 1e-12 * scale.max(1.0) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        if n > 0 && min_eigenvalue(&matrix)? < -1e-10 * scale.max(1.0) {
            return Err(Error::InvalidInput("covariance is not positive semi-definite".into()));
        }
        Ok(Self { names, matrix, window: None })
    }

    /// Sample covariance (n − 1 denominator) of a complete return panel.
    pub fn from_returns(panel: &ReturnPanel) -> Result<Self> {
        panel.ensure_complete()?;
        if panel.n_rows() < 2 {
            return Err(Error::InsufficientHistory { needed: 2, available: panel.n_rows() });
        }
        let mut c = Self::new(panel.names().to_vec(), sample_covariance(panel.values()))?;
        c.window = Some((panel.dates()[0], panel.dates()[panel.n_rows() - 1]));
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| {
            let d = (self.matrix[(i, i)] * self.matrix[(j, j)]).sqrt();
            if d > 0.0 {
                self.matrix[(i, j)] / d
            } else if i == j {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NormalStream;

    #[test]
    fn bounds_feasibility() {
        assert!(Bounds::uniform(14, 0.03, 0.10).check(14).is_ok());
        assert!(matches!(Bounds::uniform(10, 0.11, 0.2).check(10), Err(Error::Infeasible(_))));
        assert!(matches!(Bounds::uniform(5, 0.0, 0.1).check(5), Err(Error::Infeasible(_))));
    }

    /// Oracle: projection onto the box-constrained simplex solves a small QP; check its KKT
    /// conditions: w − v + τ·1 has the sign pattern dictated by the active bounds.
    #[test]
    fn projection_satisfies_kkt() {
        let mut s = NormalStream::new(1, 0);
        for _ in 0..200 {
            let n = 2 + s.index(12);
            let b = Bounds::uniform(n, 0.02, 0.4_f64.max(1.0 / n as f64 + 0.01));
            let v: Vec<f64> = (0..n).map(|_| s.normal() * 0.5).collect();
            let w = b.project(&v);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let free: Vec<usize> = (0..n).filter(|&i| w[i] > b.lower[i] + 1e-12 && w[i] < b.upper[i] - 1e-12).collect();
            if let Some(&k) = free.first() {
                let tau = v[k] - w[k];
                for i in 0..n {
                    let g = v[i] - tau - w[i];
                    if free.contains(&i) {
                        assert!(g.abs() < 1e-9);
                    } else if (w[i] - b.lower[i]).abs() < 1e-12 {
                        assert!(g <= 1e-9);
                    } else {
                        assert!(g >= -1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn projection_of_feasible_point_is_identity() {
        let b = Bounds::long_only(3);
        let w = b.project(&[0.2, 0.3, 0.5]);
        for (a, e) in w.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - e).abs() < 1e-14);
        }
        let u = Bounds::unbounded(2).project(&[3.0, 1.0]);
        assert_eq!(u, vec![1.5, -0.5]);
    }

    #[test]
    fn covariance_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(CovEstimate::new(vec!["a".into(), "b".into()], bad).is_err());
        let ok = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let c = CovEstimate::new(vec!["a".into(), "b".into()], ok).unwrap();
        assert_eq!(c.correlation()[(0, 1)], 0.5);
    }

    #[test]
    fn weight_vector_validity() {
        let w = WeightVector::new(vec!["a".into(), "b".into()], vec![0.6, 0.4], Some(Bounds::uniform(2, 0.0, 0.5))).unwrap();
        assert!(!w.is_valid());
        let w = WeightVector { bounds: None, ..w };
        assert!(w.is_valid());
    }
}
