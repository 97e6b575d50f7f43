//! Minimum-CVaR weights from scenario returns (Rockafellar–Uryasev LP).

use nalgebra::DMatrix;
use serde::Serialize;

use super::lp::{self, LinearProgram, Relation};
use super::{Bounds, WeightVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CvarProblem {
    pub names: Vec<String>,
    /// `T × n` scenario returns; losses are their negatives.
    pub scenarios: DMatrix<f64>,
    pub alpha: f64,
    pub bounds: Bounds,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvarSolution {
    pub weights: WeightVector,
    pub cvar: f64,
    /// Optimal auxiliary threshold, the portfolio VaR at `alpha`.
    pub zeta: f64,
    pub iterations: usize,
}

impl CvarProblem {
    pub fn new(names: Vec<String>, scenarios: DMatrix<f64>, alpha: f64, bounds: Bounds) -> Result<Self> {
        let p = Self { names, scenarios, alpha, bounds };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let (t, n) = self.scenarios.shape();
        if t == 0 {
            return Err(Error::InvalidInput("CVaR needs at least one scenario".into()));
        }
        if n != self.names.len() {
            return Err(Error::ShapeMismatch(format!("{n} scenario columns for {} names", self.names.len())));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.scenarios.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("scenario returns must be finite".into()));
        }
        self.bounds.check(n)
    }
}

/// Empirical CVaR of portfolio losses at `alpha`: `min_ζ ζ + Σ(L−ζ)⁺ / ((1−α)T)`,
/// attained at the upper `alpha` order statistic of the losses.
pub fn empirical_cvar(scenarios: &DMatrix<f64>, weights: &[f64], alpha: f64) -> (f64, f64) {
    let t = scenarios.nrows();
    let mut losses: Vec<f64> = (0..t).map(|r| -scenarios.row(r).iter().zip(weights).map(|(a, b)| a * b).sum::<f64>()).collect();
    losses.sort_by(f64::total_cmp);
    let k = ((alpha * t as f64).ceil() as usize).clamp(1, t) - 1;
    let zeta = losses[k];
    let tail: f64 = losses.iter().map(|l| (l - zeta).max(0.0)).sum();
    (zeta, zeta + tail / ((1.0 - alpha) * t as f64))
}

pub fn cvar_optimize(p: &CvarProblem) -> Result<CvarSolution> {
    p.validate()?;
    let (t, n) = p.scenarios.shape();
    // Column layout: per asset either a shifted w' = w − l (finite l) or a split w⁺, w⁻;
    // then ζ⁺, ζ⁻, z_1..z_T.
    let mut asset_cols: Vec<(usize, Option<usize>)> = Vec::with_capacity(n);
    let mut shift = vec![0.0; n];
    let mut col = 0;
    for i in 0..n {
        if p.bounds.lower[i].is_finite() {
            shift[i] = p.bounds.lower[i];
            asset_cols.push((col, None));
            col += 1;
        } else {
            asset_cols.push((col, Some(col + 1)));
            col += 2;
        }
    }
    let (zp, zm, z0) = (col, col + 1, col + 2);
    let width = z0 + t;
    let k = 1.0 / ((1.0 - p.alpha) * t as f64);
    let mut cost = vec![0.0; width];
    cost[zp] = 1.0;
    cost[zm] = -1.0;
    for c in cost.iter_mut().skip(z0) {
        *c = k;
    }
    let mut prog = LinearProgram::new(cost);
    let put = |row: &mut Vec<f64>, i: usize, v: f64| {
        let (a, b) = asset_cols[i];
        row[a] += v;
        if let Some(b) = b {
            row[b] -= v;
        }
    };
    let mut budget = vec![0.0; width];
    for i in 0..n {
        put(&mut budget, i, 1.0);
    }
    prog.push(budget, Relation::Eq, 1.0 - shift.iter().sum::<f64>());
    for i in 0..n {
        let u = p.bounds.upper[i];
        if u.is_finite() {
            let mut row = vec![0.0; width];
            put(&mut row, i, 1.0);
            prog.push(row, Relation::Le, u - shift[i]);
        }
    }
    // z_t + wᵀr_t + ζ ≥ 0
    for s in 0..t {
        let mut row = vec![0.0; width];
        let mut rhs = 0.0;
        for i in 0..n {
            let r = p.scenarios[(s, i)];
            put(&mut row, i, r);
            rhs -= r * shift[i];
        }
        row[zp] = 1.0;
        row[zm] = -1.0;
        row[z0 + s] = 1.0;
        prog.push(row, Relation::Ge, rhs);
    }
    let max_iter = 50 * (width + prog.constraints.len()) + 1000;
    let sol = lp::solve(&prog, max_iter)?;
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = asset_cols[i];
            shift[i] + sol.x[a] - b.map_or(0.0, |b| sol.x[b])
        })
        .collect();
    let zeta = sol.x[zp] - sol.x[zm];
    Ok(CvarSolution {
        weights: WeightVector::new(p.names.clone(), weights, Some(p.bounds.clone()))?,
        cvar: sol.objective,
        zeta,
        iterations: sol.iterations,
    })
}
