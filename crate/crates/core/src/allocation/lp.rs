//! Dense two-phase tableau simplex for small linear programs with `x ≥ 0`.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;
/// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_SWITCH: usize = 50;
/// Tableau cells beyond which the dense solver refuses to run.
pub const MAX_CELLS: usize = 60_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `min cᵀx` subject to the constraints and `x ≥ 0`.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl LinearProgram {
    pub fn new(cost: Vec<f64>) -> Self {
        Self { cost, constraints: Vec::new() }
    }

    pub fn push(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `(rows + 1) × (cols + 1)`, row-major; last row is the reduced-cost row, last column the rhs.
    data: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * (self.cols + 1) + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let p = self.data[pr * w + pc];
        for c in 0..w {
            self.data[pr * w + c] /= p;
        }
        let pivot_row: Vec<f64> = self.data[pr * w..(pr + 1) * w].to_vec();
        for r in 0..=self.rows {
            if r == pr {
                continue;
            }
            let f = self.data[r * w + pc];
            if f != 0.0 {
                let row = &mut self.data[r * w..(r + 1) * w];
                for (x, p) in row.iter_mut().zip(&pivot_row) {
                    *x -= f * p;
                }
                row[pc] = 0.0;
            }
        }
        self.basis[pr] = pc;
    }

    /// Load `cost` into the reduced-cost row relative to the current basis.
    fn set_objective(&mut self, cost: &[f64]) {
        let w = self.cols + 1;
        let obj = self.rows * w;
        for c in 0..w {
            self.data[obj + c] = if c < self.cols { cost[c] } else { 0.0 };
        }
        for r in 0..self.rows {
            let cb = cost[self.basis[r]];
            if cb != 0.0 {
                for c in 0..w {
                    self.data[obj + c] -= cb * self.data[r * w + c];
                }
            }
        }
    }

    /// Optimise the loaded objective over columns with `allowed[c]`.
    fn run(&mut self, allowed: &[bool], max_iter: usize, iterations: &mut usize) -> Result<()> {
        let mut degenerate = 0usize;
        loop {
            if *iterations >= max_iter {
                return Err(Error::IterationLimit(max_iter));
            }
            let bland = degenerate >= DEGENERATE_SWITCH;
            let obj = self.rows;
            let mut enter = None;
            let mut best = -PIVOT_TOL;
            for c in 0..self.cols {
                if !allowed[c] {
                    continue;
                }
                let d = self.at(obj, c);
                if d < best {
                    enter = Some(c);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(pc) = enter else { return Ok(()) };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r) / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            let better = if ratio < lratio - 1e-12 {
                                true
                            } else if ratio <= lratio + 1e-12 {
                                if bland {
                                    self.basis[r] < self.basis[lr]
                                } else {
                                    a > self.at(lr, pc)
                                }
                            } else {
                                false
                            };
                            if better {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((pr, ratio)) = leave else { return Err(Error::Unbounded) };
            if ratio.abs() <= 1e-14 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(pr, pc);
            *iterations += 1;
        }
    }
}

/// Solve with at most `max_iter` pivots across both phases.
pub fn solve(lp: &LinearProgram, max_iter: usize) -> Result<LpSolution> {
    let n = lp.cost.len();
    if lp.constraints.iter().any(|c| c.coeffs.len() != n) {
        return Err(Error::ShapeMismatch("constraint width differs from cost length".into()));
    }
    if lp.cost.iter().chain(lp.constraints.iter().flat_map(|c| c.coeffs.iter().chain(std::iter::once(&c.rhs))))
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidInput("linear program has non-finite data".into()));
    }
    // Normalise to non-negative rhs; `≥ 0` rows become `≤ 0` so their slack can start basic.
    let rows: Vec<(Vec<f64>, Relation, f64)> = lp
        .constraints
        .iter()
        .map(|c| {
            if c.rhs < 0.0 || (c.rhs == 0.0 && c.relation == Relation::Ge) {
                let flipped = match c.relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
                (c.coeffs.iter().map(|v| -v).collect(), flipped, -c.rhs)
            } else {
                (c.coeffs.clone(), c.relation, c.rhs)
            }
        })
        .collect();
    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let cols = n + n_slack + n_art;
    if (m + 1).saturating_mul(cols + 1) > MAX_CELLS {
        return Err(Error::InvalidInput(format!("linear program too large for the dense solver ({m} rows, {cols} columns)")));
    }
    let w = cols + 1;
    let mut t = Tableau { rows: m, cols, data: vec![0.0; (m + 1) * w], basis: vec![0; m] };
    let (mut s, mut a) = (n, n + n_slack);
    for (r, (coeffs, rel, rhs)) in rows.iter().enumerate() {
        t.data[r * w..r * w + n].copy_from_slice(coeffs);
        t.data[r * w + cols] = *rhs;
        match rel {
            Relation::Le => {
                t.data[r * w + s] = 1.0;
                t.basis[r] = s;
                s += 1;
            }
            Relation::Ge => {
                t.data[r * w + s] = -1.0;
                s += 1;
                t.data[r * w + a] = 1.0;
                t.basis[r] = a;
                a += 1;
            }
            Relation::Eq => {
                t.data[r * w + a] = 1.0;
                t.basis[r] = a;
                a += 1;
            }
        }
    }
    let is_art = |c: usize| c >= n + n_slack;
    let mut iterations = 0;
    if n_art > 0 {
        let phase1: Vec<f64> = (0..cols).map(|c| if is_art(c) { 1.0 } else { 0.0 }).collect();
        t.set_objective(&phase1);
        t.run(&vec![true; cols], max_iter, &mut iterations)?;
        let infeas = -t.at(m, cols);
        let scale = 1.0 + rows.iter().map(|r| r.2).fold(0.0, f64::max);
        if infeas > FEAS_TOL * scale {
            return Err(Error::Infeasible(format!("linear program has no feasible point (phase-one residual {infeas:.3e})")));
        }
        // Drive remaining zero-level artificials out of the basis where possible.
        for r in 0..m {
            if is_art(t.basis[r]) {
                if let Some(c) = (0..n + n_slack).find(|&c| t.at(r, c).abs() > 1e-9) {
                    t.pivot(r, c);
                }
            }
        }
    }
    let mut cost = lp.cost.clone();
    cost.resize(cols, 0.0);
    t.set_objective(&cost);
    let allowed: Vec<bool> = (0..cols).map(|c| !is_art(c)).collect();
    t.run(&allowed, max_iter, &mut iterations)?;
    let mut x = vec![0.0; n];
    for r in 0..m {
        if t.basis[r] < n {
            x[t.basis[r]] = t.rhs(r).max(0.0);
        }
    }
    let objective = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution { x, objective, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_maximisation() {
        // max 3x + 5y s.t. x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), value 36.
        let mut lp = LinearProgram::new(vec![-3.0, -5.0]);
        lp.push(vec![1.0, 0.0], Relation::Le, 4.0);
        lp.push(vec![0.0, 2.0], Relation::Le, 12.0);
        lp.push(vec![3.0, 2.0], Relation::Le, 18.0);
        let s = solve(&lp, 1000).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-12 && (s.x[1] - 6.0).abs() < 1e-12);
        assert!((s.objective + 36.0).abs() < 1e-12);
    }

    #[test]
    fn equality_and_ge_rows() {
        // min x + 2y s.t. x + y = 3, x ≥ 1, y ≥ 0.5 → (2.5, 0.5), value 3.5.
        let mut lp = LinearProgram::new(vec![1.0, 2.0]);
        lp.push(vec![1.0, 1.0], Relation::Eq, 3.0);
        lp.push(vec![1.0, 0.0], Relation::Ge, 1.0);
        lp.push(vec![0.0, 1.0], Relation::Ge, 0.5);
        let s = solve(&lp, 1000).unwrap();
        assert!((s.objective - 3.5).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.push(vec![1.0], Relation::Le, 1.0);
        lp.push(vec![1.0], Relation::Ge, 2.0);
        assert!(matches!(solve(&lp, 100), Err(Error::Infeasible(_))));
        let mut lp = LinearProgram::new(vec![-1.0, 0.0]);
        lp.push(vec![1.0, -1.0], Relation::Le, 1.0);
        assert!(matches!(solve(&lp, 100), Err(Error::Unbounded)));
    }

    #[test]
    fn negative_rhs_and_redundant_rows() {
        // -x ≤ -2 is x ≥ 2; duplicated equality is redundant.
        let mut lp = LinearProgram::new(vec![1.0, 1.0]);
        lp.push(vec![-1.0, 0.0], Relation::Le, -2.0);
        lp.push(vec![1.0, 1.0], Relation::Eq, 5.0);
        lp.push(vec![2.0, 2.0], Relation::Eq, 10.0);
        let s = solve(&lp, 100).unwrap();
        assert!((s.objective - 5.0).abs() < 1e-12);
        assert!(s.x[0] >= 2.0 - 1e-12);
    }

    #[test]
    fn degenerate_cycling_example() {
        // Beale's example cycles under the largest-coefficient rule without a safeguard.
        let mut lp = LinearProgram::new(vec![-0.75, 150.0, -0.02, 6.0]);
        lp.push(vec![0.25, -60.0, -0.04, 9.0], Relation::Le, 0.0);
        lp.push(vec![0.5, -90.0, -0.02, 3.0], Relation::Le, 0.0);
        lp.push(vec![0.0, 0.0, 1.0, 0.0], Relation::Le, 1.0);
        let s = solve(&lp, 10_000).unwrap();
        assert!((s.objective + 0.05).abs() < 1e-10);
    }
}
