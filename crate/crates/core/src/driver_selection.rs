//! Common-driver selection.
//!
//! Five procedures pick `m` drivers out of `K` candidates for a portfolio of
//! `n` assets:
//!
//! * `RccpRank` ranks candidates by how many assets they correlate with above
//!   `epsilon` (repeatedness), then by the summed absolute correlation over
//!   those assets (strength).
//! * `RccpThreshold` marks a candidate as specific to an asset when both its
//!   lag-0 and lag-1 correlations exceed `t0`/`t1`, and keeps the candidates
//!   specific to the most assets.
//! * `GreedyGs` and `DpGs` minimise the pairwise dependence objective `G(S)`
//!   estimated by linear regressions.
//! * `MaxLikelihood` grows the cause set that maximises a multivariate normal
//!   likelihood of the asset panel.
//!
//! All rankings break ties by (repeatedness desc, strength desc, identifier asc).

use std::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{least_squares_multi, pearson, with_intercept};
use crate::market_data::{slice_window, ReturnPanel, WindowSpec};
use crate::par;

/// Correlations within this distance below `epsilon` still count as relevant.
pub const THRESHOLD_TOLERANCE: f64 = 1e-12;
/// Ridge added to every normal-equation solve in the `G(S)` estimators.
pub const GS_RIDGE: f64 = 1e-8;
/// Upper bound on `K * m` for the dynamic-programming table.
pub const DP_TABLE_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    RccpRank,
    RccpThreshold,
    GreedyGs,
    DpGs,
    MaxLikelihood,
}

/// How the pairwise dependence term of `G(S)` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GsEstimator {
    /// Joint term is the sample mean of the product of the fitted conditional
    /// means; `G(S)` is then `Σ_{i≠j} |Cov(Ŷ_i, Ŷ_j)|`.
    #[default]
    FittedCovariance,
    /// Joint term regresses the product target `Y_i·Y_j` on `S`; `G(S)` is then
    /// the summed absolute residual (conditional) covariance.
    ScreenOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub m: usize,
    pub epsilon: f64,
    pub t0: f64,
    pub t1: f64,
    pub mode: SelectionMode,
    pub exclude: Vec<String>,
    /// Move candidates with |corr| above `collinear_threshold` to any asset onto the exclusion list.
    pub screen_collinear: bool,
    pub collinear_threshold: f64,
    /// Exhaustive subset search for `MaxLikelihood` (requires K ≤ 15).
    pub exhaustive: bool,
    pub estimator: GsEstimator,
    /// Optional window applied by [`select_drivers`] before selection.
    pub window: Option<WindowSpec>,
    /// Bound on the pairwise product term; reported only, never enforced.
    pub sccs_bound: Option<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            m: 2,
            epsilon: 0.5,
            t0: 0.0,
            t1: 0.0,
            mode: SelectionMode::RccpRank,
            exclude: Vec::new(),
            screen_collinear: true,
            collinear_threshold: 0.999,
            exhaustive: false,
            estimator: GsEstimator::FittedCovariance,
            window: None,
            sccs_bound: None,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self, n_candidates: usize) -> Result<()> {
        if self.m == 0 || self.m > n_candidates {
            return Err(Error::InvalidInput(format!(
                "m = {} must lie in 1..={n_candidates}",
                self.m
            )));
        }
        for (name, v) in [("epsilon", self.epsilon), ("t0", self.t0), ("t1", self.t1)] {
            if !(0.0..=1.0).contains(&v) && !(name != "epsilon" && v > 1.0) {
                return Err(Error::InvalidInput(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionScorecard {
    pub mode: SelectionMode,
    pub assets: Vec<String>,
    pub candidates: Vec<String>,
    /// K × n correlation of each candidate with each asset (lag 0).
    pub correlation: DMatrix<f64>,
    /// K × n relevance (or specificity, in threshold mode) indicator.
    pub relevance: DMatrix<u8>,
    pub repeatedness: Vec<usize>,
    pub strength: Vec<f64>,
    pub ranking: Vec<String>,
    pub selected: Vec<String>,
    /// Exclusion list actually applied (user list plus collinearity screen).
    pub excluded: Vec<String>,
    /// `G(S)` for GS modes, or the DP table optimum for `DpGs`.
    pub objective: Option<f64>,
    /// `G(S) ≤ |S|·epsilon`, reported for GS modes.
    pub constraint_satisfied: Option<bool>,
    pub log_likelihood: Option<f64>,
}

impl SelectionScorecard {
    pub fn rank_of(&self, candidate: &str) -> Option<usize> {
        self.ranking.iter().position(|c| c == candidate)
    }
}

fn check_aligned(assets: &ReturnPanel, candidates: &ReturnPanel) -> Result<()> {
    if assets.dates() != candidates.dates() {
        return Err(Error::ShapeMismatch("asset and candidate panels must share a date index".into()));
    }
    assets.ensure_complete()?;
    candidates.ensure_complete()?;
    if assets.n_rows() < 3 {
        return Err(Error::InsufficientHistory { needed: 3, available: assets.n_rows() });
    }
    Ok(())
}

fn check_variance(panel: &ReturnPanel) -> Result<()> {
    for j in 0..panel.n_cols() {
        let c = panel.column(j);
        if c.iter().all(|v| *v == c[0]) {
            return Err(Error::DegenerateSeries(panel.names()[j].clone()));
        }
    }
    Ok(())
}

/// K × n Pearson correlation of candidates (rows) against assets (columns),
/// with candidates led by `lag` rows relative to assets.
pub fn correlation_matrix(assets: &ReturnPanel, candidates: &ReturnPanel, lag: usize) -> Result<DMatrix<f64>> {
    check_aligned(assets, candidates)?;
    check_variance(assets)?;
    check_variance(candidates)?;
    let t = assets.n_rows();
    if t < lag + 3 {
        return Err(Error::InsufficientHistory { needed: lag + 3, available: t });
    }
    let a_cols: Vec<Vec<f64>> = (0..assets.n_cols()).map(|i| assets.column(i)[lag..].to_vec()).collect();
    let rows = par::map_range(candidates.n_cols(), |k| {
        let c = candidates.column(k);
        let c = &c[..t - lag];
        a_cols
            .iter()
            .enumerate()
            .map(|(i, a)| {
                pearson(c, a).ok_or_else(|| {
                    if c.iter().all(|v| *v == c[0]) {
                        Error::DegenerateSeries(candidates.names()[k].clone())
                    } else {
                        Error::DegenerateSeries(assets.names()[i].clone())
                    }
                })
            })
            .collect::<Result<Vec<f64>>>()
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(candidates.n_cols(), assets.n_cols(), |k, i| rows[k][i]))
}

fn rank_order(names: &[String], repeatedness: &[usize], strength: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..names.len()).collect();
    idx.sort_by(|&a, &b| {
        repeatedness[b]
            .cmp(&repeatedness[a])
            .then_with(|| strength[b].partial_cmp(&strength[a]).unwrap_or(Ordering::Equal))
            .then_with(|| names[a].cmp(&names[b]))
    });
    idx
}

fn collinear_exclusions(candidates: &[String], corr: &DMatrix<f64>, cfg: &SelectionConfig) -> Vec<String> {
    let mut out = cfg.exclude.clone();
    if cfg.screen_collinear {
        for (k, name) in candidates.iter().enumerate() {
            let hit = corr.row(k).iter().any(|c| c.abs() > cfg.collinear_threshold);
            if hit && !out.contains(name) {
                out.push(name.clone());
            }
        }
    }
    out
}

/// Rank-mode scorecard from a precomputed K × n correlation matrix.
pub fn scorecard_from_correlation(
    candidates: &[String],
    assets: &[String],
    correlation: &DMatrix<f64>,
    epsilon: f64,
    m: usize,
    exclude: &[String],
) -> Result<SelectionScorecard> {
    let (k, n) = correlation.shape();
    if k != candidates.len() || n != assets.len() {
        return Err(Error::ShapeMismatch(format!("correlation is {k}x{n}")));
    }
    let relevance = correlation.map(|c| u8::from(c.abs() >= epsilon - THRESHOLD_TOLERANCE));
    let repeatedness: Vec<usize> = (0..k).map(|r| relevance.row(r).iter().map(|&v| v as usize).sum()).collect();
    let strength: Vec<f64> = (0..k)
        .map(|r| (0..n).map(|i| correlation[(r, i)].abs() * f64::from(relevance[(r, i)])).sum())
        .collect();
    let order = rank_order(candidates, &repeatedness, &strength);
    let ranking: Vec<String> = order.iter().map(|&i| candidates[i].clone()).collect();
    let selected: Vec<String> = ranking.iter().filter(|c| !exclude.contains(c)).take(m).cloned().collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(SelectionScorecard {
        mode: SelectionMode::RccpRank,
        assets: assets.to_vec(),
        candidates: candidates.to_vec(),
        correlation: correlation.clone(),
        relevance,
        repeatedness,
        strength,
        ranking,
        selected,
        excluded: exclude.to_vec(),
        objective: None,
        constraint_satisfied: None,
        log_likelihood: None,
    })
}

pub fn select_rccp_rank(assets: &ReturnPanel, candidates: &ReturnPanel, cfg: &SelectionConfig) -> Result<SelectionScorecard> {
    cfg.validate(candidates.n_cols())?;
    let corr = correlation_matrix(assets, candidates, 0)?;
    let exclude = collinear_exclusions(candidates.names(), &corr, cfg);
    scorecard_from_correlation(candidates.names(), assets.names(), &corr, cfg.epsilon, cfg.m, &exclude)
}

pub fn select_rccp_threshold(
    assets: &ReturnPanel,
    candidates: &ReturnPanel,
    cfg: &SelectionConfig,
) -> Result<SelectionScorecard> {
    cfg.validate(candidates.n_cols())?;
    let c0 = correlation_matrix(assets, candidates, 0)?;
    let c1 = correlation_matrix(assets, candidates, 1)?;
    let (k, n) = c0.shape();
    let specific = DMatrix::from_fn(k, n, |r, i| u8::from(c0[(r, i)] > cfg.t0 && c1[(r, i)] > cfg.t1));
    let counts: Vec<usize> = (0..k).map(|r| specific.row(r).iter().map(|&v| v as usize).sum()).collect();
    let strength: Vec<f64> =
        (0..k).map(|r| (0..n).map(|i| c0[(r, i)].abs() * f64::from(specific[(r, i)])).sum()).collect();
    let names = candidates.names();
    let exclude = collinear_exclusions(names, &c0, cfg);
    let order = rank_order(names, &counts, &strength);
    let ranking: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();
    let selected: Vec<String> = order
        .iter()
        .filter(|&&i| counts[i] > 0 && !exclude.contains(&names[i]))
        .take(cfg.m)
        .map(|&i| names[i].clone())
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(SelectionScorecard {
        mode: SelectionMode::RccpThreshold,
        assets: assets.names().to_vec(),
        candidates: names.to_vec(),
        correlation: c0,
        relevance: specific,
        repeatedness: counts,
        strength,
        ranking,
        selected,
        excluded: exclude,
        objective: None,
        constraint_satisfied: None,
        log_likelihood: None,
    })
}

/// `G(S)` with the default estimator.
pub fn score_gs(assets: &ReturnPanel, subset: &[String], candidates: &ReturnPanel) -> Result<f64> {
    score_gs_with(assets, subset, candidates, GsEstimator::default())
}

pub fn score_gs_with(
    assets: &ReturnPanel,
    subset: &[String],
    candidates: &ReturnPanel,
    estimator: GsEstimator,
) -> Result<f64> {
    check_aligned(assets, candidates)?;
    let cols: Vec<usize> = subset.iter().map(|s| candidates.index_of(s)).collect::<Result<_>>()?;
    let drivers = DMatrix::from_fn(candidates.n_rows(), cols.len(), |t, j| candidates.values()[(t, cols[j])]);
    gs_objective(assets.values(), &drivers, estimator)
}

/// `G(S) = Σ_{i≠j} |P̂(Y_iY_j|S) − P̂(Y_i|S)P̂(Y_j|S)|` on raw matrices.
///
/// An empty driver matrix conditions on the intercept alone.
pub fn gs_objective(assets: &DMatrix<f64>, drivers: &DMatrix<f64>, estimator: GsEstimator) -> Result<f64> {
    let (t, n) = assets.shape();
    if n < 2 {
        return Ok(0.0);
    }
    let design = with_intercept(drivers);
    let beta = least_squares_multi(&design, assets, GS_RIDGE, GS_RIDGE).map_err(|_| Error::SingularDesign)?;
    let fitted = &design * beta;
    let tf = t as f64;
    let mut total = 0.0;
    match estimator {
        GsEstimator::FittedCovariance => {
            let means: Vec<f64> = (0..n).map(|i| fitted.column(i).sum() / tf).collect();
            for i in 0..n {
                for j in (i + 1)..n {
                    let joint = fitted.column(i).dot(&fitted.column(j)) / tf;
                    total += 2.0 * (joint - means[i] * means[j]).abs();
                }
            }
        }
        GsEstimator::ScreenOff => {
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
            let products = DMatrix::from_fn(t, pairs.len(), |r, p| assets[(r, pairs[p].0)] * assets[(r, pairs[p].1)]);
            let pb = least_squares_multi(&design, &products, GS_RIDGE, GS_RIDGE).map_err(|_| Error::SingularDesign)?;
            let joint = &design * pb;
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let dev: f64 = (0..t).map(|r| joint[(r, p)] - fitted[(r, i)] * fitted[(r, j)]).sum::<f64>() / tf;
                total += 2.0 * dev.abs();
            }
        }
    }
    Ok(total)
}

fn subset_matrix(candidates: &ReturnPanel, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(candidates.n_rows(), idx.len(), |t, j| candidates.values()[(t, idx[j])])
}

/// Candidate indices eligible for selection, in identifier order.
fn pool(candidates: &ReturnPanel, exclude: &[String]) -> Vec<usize> {
    let names = candidates.names();
    let mut idx: Vec<usize> = (0..names.len()).filter(|&k| !exclude.contains(&names[k])).collect();
    idx.sort_by(|&a, &b| names[a].cmp(&names[b]));
    idx
}

fn base_scorecard(
    mode: SelectionMode,
    assets: &ReturnPanel,
    candidates: &ReturnPanel,
    cfg: &SelectionConfig,
) -> Result<SelectionScorecard> {
    let corr = correlation_matrix(assets, candidates, 0)?;
    let exclude = collinear_exclusions(candidates.names(), &corr, cfg);
    let mut card = scorecard_from_correlation(candidates.names(), assets.names(), &corr, cfg.epsilon, cfg.m, &[])?;
    card.mode = mode;
    card.selected.clear();
    card.excluded = exclude;
    Ok(card)
}

/// Put the selected candidates first (in selection order), then the rest in RCCP rank order.
fn ranking_with_selection_first(card: &SelectionScorecard, selected: &[String]) -> Vec<String> {
    let mut out = selected.to_vec();
    out.extend(card.ranking.iter().filter(|c| !selected.contains(c)).cloned());
    out
}

pub fn select_greedy_gs(assets: &ReturnPanel, candidates: &ReturnPanel, cfg: &SelectionConfig) -> Result<SelectionScorecard> {
    cfg.validate(candidates.n_cols())?;
    let mut card = base_scorecard(SelectionMode::GreedyGs, assets, candidates, cfg)?;
    let mut remaining = pool(candidates, &card.excluded);
    if remaining.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut current = gs_objective(assets.values(), &subset_matrix(candidates, &[]), cfg.estimator)?;
    while chosen.len() < cfg.m && !remaining.is_empty() {
        let scores = par::try_map_range(remaining.len(), |r| {
            let mut trial = chosen.clone();
            trial.push(remaining[r]);
            gs_objective(assets.values(), &subset_matrix(candidates, &trial), cfg.estimator)
        })?;
        // `remaining` is in identifier order, so the first minimum wins ties.
        let (best_pos, best) = scores
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &g)| if g < acc.1 { (i, g) } else { acc });
        // A selection always holds at least one driver; afterwards stop once G stops decreasing.
        if !chosen.is_empty() && best >= current {
            break;
        }
        chosen.push(remaining.remove(best_pos));
        current = best;
    }
    let selected: Vec<String> = chosen.iter().map(|&k| candidates.names()[k].clone()).collect();
    card.ranking = ranking_with_selection_first(&card, &selected);
    card.objective = Some(current);
    card.constraint_satisfied = Some(current <= selected.len() as f64 * cfg.epsilon);
    card.selected = selected;
    Ok(card)
}

/// Result of the knapsack-style table used by [`select_dp_gs`].
#[derive(Debug, Clone, PartialEq)]
pub struct DpTable {
    /// `F[k][m']` for `k = 0..=K`, `m' = 0..=m`.
    pub table: Vec<Vec<f64>>,
    pub chosen: Vec<usize>,
}

/// Fill `F(k,m') = min{F(k−1,m'), F(k−1,m'−1) + Δ(k)}` and backtrack.
///
/// Ties keep the earlier items, so callers pass `deltas` in tie-break order.
pub fn dp_select(deltas: &[f64], m: usize) -> Result<DpTable> {
    let k_total = deltas.len();
    if k_total.saturating_mul(m) > DP_TABLE_LIMIT {
        return Err(Error::TableTooLarge { cells: k_total.saturating_mul(m) });
    }
    let mut f = vec![vec![f64::INFINITY; m + 1]; k_total + 1];
    for row in f.iter_mut() {
        row[0] = 0.0;
    }
    for k in 1..=k_total {
        for mm in 1..=m {
            let skip = f[k - 1][mm];
            let take = f[k - 1][mm - 1] + deltas[k - 1];
            f[k][mm] = skip.min(take);
        }
    }
    let mut chosen = Vec::new();
    let mut mm = m.min(k_total);
    let mut k = k_total;
    while mm > 0 && k > 0 {
        // Prefer skipping item k when that is no worse, which keeps earlier items.
        if f[k - 1][mm] <= f[k][mm] {
            k -= 1;
        } else {
            chosen.push(k - 1);
            k -= 1;
            mm -= 1;
        }
    }
    chosen.reverse();
    Ok(DpTable { table: f, chosen })
}

pub fn select_dp_gs(assets: &ReturnPanel, candidates: &ReturnPanel, cfg: &SelectionConfig) -> Result<SelectionScorecard> {
    cfg.validate(candidates.n_cols())?;
    let cells = candidates.n_cols().saturating_mul(cfg.m);
    if cells > DP_TABLE_LIMIT {
        return Err(Error::TableTooLarge { cells });
    }
    let mut card = base_scorecard(SelectionMode::DpGs, assets, candidates, cfg)?;
    let eligible = pool(candidates, &card.excluded);
    if eligible.is_empty() {
        return Err(Error::EmptySelection);
    }
    let deltas = par::try_map_range(eligible.len(), |r| {
        gs_objective(assets.values(), &subset_matrix(candidates, &[eligible[r]]), cfg.estimator)
    })?;
    let m = cfg.m.min(eligible.len());
    let dp = dp_select(&deltas, m)?;
    let selected: Vec<String> = dp.chosen.iter().map(|&r| candidates.names()[eligible[r]].clone()).collect();
    let optimum = dp.table[eligible.len()][m];
    card.ranking = ranking_with_selection_first(&card, &selected);
    card.objective = Some(optimum);
    card.constraint_satisfied = Some(optimum <= selected.len() as f64 * cfg.epsilon);
    card.selected = selected;
    Ok(card)
}

/// Linear common-cause model fitted for the likelihood search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlCauseModel {
    pub intercepts: Vec<f64>,
    /// n × M loadings of each asset on each cause.
    pub alpha: DMatrix<f64>,
    pub noise_variance: Vec<f64>,
    pub cause_variance: Vec<f64>,
    pub cause_mean: Vec<f64>,
}

impl MlCauseModel {
    /// Least-squares fit of each asset on the causes (rows are observations).
    pub fn fit(assets: &DMatrix<f64>, causes: &DMatrix<f64>) -> Result<Self> {
        let (t, n) = assets.shape();
        let m = causes.ncols();
        let design = with_intercept(causes);
        let beta = least_squares_multi(&design, assets, GS_RIDGE, GS_RIDGE).map_err(|_| Error::SingularDesign)?;
        let resid = assets - &design * &beta;
        let tf = t as f64;
        let noise_variance: Vec<f64> = (0..n).map(|i| resid.column(i).norm_squared() / tf).collect();
        let cause_mean: Vec<f64> = (0..m).map(|k| causes.column(k).sum() / tf).collect();
        let cause_variance: Vec<f64> = (0..m)
            .map(|k| causes.column(k).iter().map(|z| (z - cause_mean[k]).powi(2)).sum::<f64>() / tf)
            .collect();
        Ok(Self {
            intercepts: (0..n).map(|i| beta[(0, i)]).collect(),
            alpha: DMatrix::from_fn(n, m, |i, k| beta[(k + 1, i)]),
            noise_variance,
            cause_variance,
            cause_mean,
        })
    }

    /// Implied covariance `Σ_ij = Σ_k α_ik α_jk Var(Z_k) + δ_ij σ²_εi`.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let n = self.alpha.nrows();
        DMatrix::from_fn(n, n, |i, j| {
            let shared: f64 = (0..self.alpha.ncols())
                .map(|k| self.alpha[(i, k)] * self.alpha[(j, k)] * self.cause_variance[k])
                .sum();
            if i == j {
                shared + self.noise_variance[i]
            } else {
                shared
            }
        })
    }

    pub fn implied_correlation(&self) -> DMatrix<f64> {
        let cov = self.implied_covariance();
        let n = cov.nrows();
        DMatrix::from_fn(n, n, |i, j| cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt())
    }

    /// Multivariate normal log-likelihood of the asset rows with per-row mean
    /// `a_i + Σ_k α_ik Z_k` and the implied covariance. A non-PD covariance is
    /// shrunk toward its diagonal before giving up.
    pub fn log_likelihood(&self, assets: &DMatrix<f64>, causes: &DMatrix<f64>) -> Result<f64> {
        let (t, n) = assets.shape();
        let cov = self.implied_covariance();
        let diag = DMatrix::from_diagonal(&cov.diagonal());
        let chol = [0.0, 1e-4, 1e-2, 0.1, 0.5]
            .iter()
            .find_map(|&lambda| Cholesky::new(&cov * (1.0 - lambda) + &diag * lambda))
            .ok_or(Error::SingularCovariance)?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut resid = DMatrix::zeros(n, t);
        for r in 0..t {
            for i in 0..n {
                let mean: f64 =
                    self.intercepts[i] + (0..self.alpha.ncols()).map(|k| self.alpha[(i, k)] * causes[(r, k)]).sum::<f64>();
                resid[(i, r)] = assets[(r, i)] - mean;
            }
        }
        let solved = chol.solve(&resid);
        let quad: f64 = resid.iter().zip(solved.iter()).map(|(a, b)| a * b).sum();
        let tf = t as f64;
        let ll = -0.5 * tf * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det) - 0.5 * quad;
        if !ll.is_finite() {
            return Err(Error::SingularCovariance);
        }
        Ok(ll)
    }
}

fn subset_log_likelihood(assets: &ReturnPanel, candidates: &ReturnPanel, idx: &[usize]) -> Result<f64> {
    let causes = subset_matrix(candidates, idx);
    MlCauseModel::fit(assets.values(), &causes)?.log_likelihood(assets.values(), &causes)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

pub fn select_max_likelihood(
    assets: &ReturnPanel,
    candidates: &ReturnPanel,
    cfg: &SelectionConfig,
) -> Result<SelectionScorecard> {
    cfg.validate(candidates.n_cols())?;
    if assets.n_cols() < 1 {
        return Err(Error::InvalidInput("no assets".into()));
    }
    let mut card = base_scorecard(SelectionMode::MaxLikelihood, assets, candidates, cfg)?;
    let eligible = pool(candidates, &card.excluded);
    if eligible.is_empty() {
        return Err(Error::EmptySelection);
    }
    let m = cfg.m.min(eligible.len());
    let (chosen, best) = if cfg.exhaustive {
        if candidates.n_cols() > 15 {
            return Err(Error::InvalidInput("exhaustive likelihood search needs K <= 15".into()));
        }
        let subsets: Vec<Vec<usize>> = combinations(eligible.len(), m)
            .into_iter()
            .map(|c| c.into_iter().map(|r| eligible[r]).collect())
            .collect();
        let lls = par::try_map_range(subsets.len(), |s| subset_log_likelihood(assets, candidates, &subsets[s]))?;
        let (pos, ll) = lls
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
        (subsets[pos].clone(), ll)
    } else {
        let mut remaining = eligible.clone();
        let mut chosen: Vec<usize> = Vec::new();
        let mut best = f64::NEG_INFINITY;
        while chosen.len() < m {
            let lls = par::try_map_range(remaining.len(), |r| {
                let mut trial = chosen.clone();
                trial.push(remaining[r]);
                subset_log_likelihood(assets, candidates, &trial)
            })?;
            let (pos, ll) = lls
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
            chosen.push(remaining.remove(pos));
            best = ll;
        }
        (chosen, best)
    };
    let selected: Vec<String> = chosen.iter().map(|&k| candidates.names()[k].clone()).collect();
    card.ranking = ranking_with_selection_first(&card, &selected);
    card.log_likelihood = Some(best);
    card.selected = selected;
    Ok(card)
}

/// Dispatch on `cfg.mode`, slicing `cfg.window` first when set.
pub fn select_drivers(assets: &ReturnPanel, candidates: &ReturnPanel, cfg: &SelectionConfig) -> Result<SelectionScorecard> {
    let (a, c);
    let (assets, candidates) = match &cfg.window {
        Some(w) => {
            a = slice_window(assets, w)?;
            c = slice_window(candidates, w)?;
            (&a, &c)
        }
        None => (assets, candidates),
    };
    match cfg.mode {
        SelectionMode::RccpRank => select_rccp_rank(assets, candidates, cfg),
        SelectionMode::RccpThreshold => select_rccp_threshold(assets, candidates, cfg),
        SelectionMode::GreedyGs => select_greedy_gs(assets, candidates, cfg),
        SelectionMode::DpGs => select_dp_gs(assets, candidates, cfg),
        SelectionMode::MaxLikelihood => select_max_likelihood(assets, candidates, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NormalStream;
    use chrono::NaiveDate;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn dates(t: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        (0..t as u64).map(|i| start + chrono::Days::new(i)).collect()
    }

    fn panel(prefix: &str, cols: &[Vec<f64>]) -> ReturnPanel {
        ReturnPanel::from_columns(dates(cols[0].len()), names(prefix, cols.len()), cols).unwrap()
    }

    fn worked_example_c() -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 3, &[0.6, 0.4, 0.3, 0.8, 0.7, 0.5, 0.2, 0.6, 0.4, 0.9, 0.8, 0.7])
    }

    #[test]
    fn worked_example_scorecard() {
        let card = scorecard_from_correlation(&names("X", 4), &names("Y", 3), &worked_example_c(), 0.5, 2, &[]).unwrap();
        assert_eq!(card.repeatedness, vec![1, 3, 1, 3]);
        for (s, e) in card.strength.iter().zip([0.6, 2.0, 0.6, 2.4]) {
            assert!((s - e).abs() < 1e-12);
        }
        assert_eq!(card.ranking, vec!["X4", "X2", "X1", "X3"]);
        assert_eq!(card.selected, vec!["X4", "X2"]);
    }

    #[test]
    fn exclusion_list_skips_to_next_rank() {
        let card =
            scorecard_from_correlation(&names("X", 4), &names("Y", 3), &worked_example_c(), 0.5, 2, &["X4".into()])
                .unwrap();
        assert_eq!(card.selected, vec!["X2", "X1"]);
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let mut s = NormalStream::new(3, 0);
        let c = DMatrix::from_fn(6, 4, |_, _| (s.uniform() * 2.0 - 1.0) * 0.95);
        let eps = 0.4;
        let card = scorecard_from_correlation(&names("X", 6), &names("Y", 4), &c, eps, 3, &[]).unwrap();
        // Oracle: enumerate (R, S, name) tuples and sort lexicographically.
        let mut tuples: Vec<(usize, f64, String)> = (0..6)
            .map(|k| {
                let rel: Vec<bool> = (0..4).map(|i| c[(k, i)].abs() >= eps).collect();
                let r = rel.iter().filter(|b| **b).count();
                let st: f64 = (0..4).filter(|&i| rel[i]).map(|i| c[(k, i)].abs()).sum();
                (r, st, format!("X{}", k + 1))
            })
            .collect();
        tuples.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.partial_cmp(&a.1).unwrap()).then(a.2.cmp(&b.2)));
        let expected: Vec<String> = tuples.into_iter().map(|t| t.2).collect();
        assert_eq!(card.ranking, expected);
    }

    #[test]
    fn single_candidate_is_selected() {
        let mut s = NormalStream::new(5, 0);
        let z: Vec<f64> = (0..50).map(|_| s.normal()).collect();
        let y: Vec<f64> = z.iter().map(|v| v + 0.3 * s.normal()).collect();
        let cfg = SelectionConfig { m: 1, epsilon: 0.1, ..Default::default() };
        let card = select_rccp_rank(&panel("Y", &[y]), &panel("X", &[z]), &cfg).unwrap();
        assert_eq!(card.selected, vec!["X1"]);
    }

    #[test]
    fn degenerate_series_rejected() {
        let y = vec![0.1, 0.2, 0.3, 0.1];
        let z = vec![1.0; 4];
        let err = select_rccp_rank(&panel("Y", &[y]), &panel("X", &[z]), &SelectionConfig { m: 1, ..Default::default() });
        assert!(matches!(err, Err(Error::DegenerateSeries(n)) if n == "X1"));
    }

    #[test]
    fn collinear_candidate_is_screened() {
        let mut s = NormalStream::new(8, 0);
        let y: Vec<f64> = (0..80).map(|_| s.normal()).collect();
        let copy = y.iter().map(|v| 2.0 * v + 1.0).collect::<Vec<_>>();
        let other: Vec<f64> = y.iter().map(|v| v + 0.5 * s.normal()).collect();
        let cfg = SelectionConfig { m: 1, epsilon: 0.1, ..Default::default() };
        let card = select_rccp_rank(&panel("Y", std::slice::from_ref(&y)), &panel("X", &[copy.clone(), other.clone()]), &cfg).unwrap();
        assert_eq!(card.selected, vec!["X2"]);
        assert!(card.excluded.contains(&"X1".to_string()));
        let off = SelectionConfig { screen_collinear: false, ..cfg };
        let card = select_rccp_rank(&panel("Y", &[y]), &panel("X", &[copy, other]), &off).unwrap();
        assert_eq!(card.selected, vec!["X1"]);
    }

    /// Assets Y_i = b_i·Z + noise; candidates [Z, pure noise...].
    fn one_cause_market(seed: u64, t: usize, n: usize, extra: usize, noise: f64) -> (ReturnPanel, ReturnPanel) {
        let mut s = NormalStream::new(seed, 0);
        let z: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let assets: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let b = 0.5 + 0.3 * i as f64;
                z.iter().map(|v| b * v + noise * s.normal()).collect()
            })
            .collect();
        let mut cands = vec![z];
        for _ in 0..extra {
            cands.push((0..t).map(|_| s.normal()).collect());
        }
        (panel("Y", &assets), panel("X", &cands))
    }

    #[test]
    fn threshold_mode_vacuous_thresholds_count_all() {
        // Assets load on the driver at t and t-1, so both lags correlate positively.
        let mut s = NormalStream::new(4, 0);
        let t = 300;
        let z: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let w: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let assets: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                (0..t)
                    .map(|i| {
                        let lagged = if i > 0 { z[i - 1] + w[i - 1] } else { 0.0 };
                        (1.0 + 0.2 * k as f64) * (z[i] + w[i] + lagged) + 0.2 * s.normal()
                    })
                    .collect()
            })
            .collect();
        let cfg = SelectionConfig { m: 2, mode: SelectionMode::RccpThreshold, t0: 0.0, t1: 0.0, ..Default::default() };
        let card = select_rccp_threshold(&panel("Y", &assets), &panel("X", &[z, w]), &cfg).unwrap();
        assert_eq!(card.repeatedness, vec![3, 3]);
        assert_eq!(card.selected.len(), 2);
    }

    #[test]
    fn threshold_mode_prefers_widely_specific_candidate() {
        // Assets follow lagged and contemporaneous driver moves so both lags correlate.
        let mut s = NormalStream::new(12, 0);
        let t = 300;
        let z: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let w: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let asset = |k: f64, src: &Vec<f64>, s: &mut NormalStream| -> Vec<f64> {
            (0..t).map(|i| k * (src[i] + if i > 0 { src[i - 1] } else { 0.0 }) + 0.3 * s.normal()).collect()
        };
        let a1 = asset(1.0, &z, &mut s);
        let a2 = asset(0.8, &z, &mut s);
        let a3 = asset(1.2, &z, &mut s);
        let a4 = asset(1.0, &w, &mut s);
        let noise: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let cands = panel("X", &[noise, w, z]);
        let cfg = SelectionConfig { m: 1, mode: SelectionMode::RccpThreshold, t0: 0.3, t1: 0.3, ..Default::default() };
        let card = select_rccp_threshold(&panel("Y", &[a1, a2, a3, a4]), &cands, &cfg).unwrap();
        assert_eq!(card.repeatedness, vec![0, 1, 3]);
        assert_eq!(card.ranking[0], "X3");
        assert_eq!(card.selected, vec!["X3"]);
    }

    #[test]
    fn impossible_threshold_is_empty_selection() {
        let (a, c) = one_cause_market(4, 100, 3, 2, 0.2);
        let cfg = SelectionConfig { m: 1, mode: SelectionMode::RccpThreshold, t0: 1.1, t1: 0.0, ..Default::default() };
        assert!(matches!(select_rccp_threshold(&a, &c, &cfg), Err(Error::EmptySelection)));
    }

    #[test]
    fn one_asset_objective_is_zero() {
        let (a, c) = one_cause_market(1, 100, 1, 1, 0.2);
        assert_eq!(score_gs(&a, &["X1".into()], &c).unwrap(), 0.0);
    }

    #[test]
    fn fitted_covariance_matches_direct_oracle() {
        let (a, c) = one_cause_market(21, 500, 4, 2, 0.05);
        let g = score_gs(&a, &["X1".into(), "X2".into()], &c).unwrap();
        // Oracle: OLS by SVD, fitted values, population covariance.
        let x = with_intercept(&subset_matrix(&c, &[0, 1]));
        let svd = x.clone().svd(true, true);
        let mut oracle = 0.0;
        let yhat: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let b = svd.solve(&a.values().column(i).into_owned(), 1e-14).unwrap();
                (&x * b).iter().copied().collect()
            })
            .collect();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let mi = yhat[i].iter().sum::<f64>() / 500.0;
                    let mj = yhat[j].iter().sum::<f64>() / 500.0;
                    let cov: f64 = yhat[i].iter().zip(&yhat[j]).map(|(p, q)| (p - mi) * (q - mj)).sum::<f64>() / 500.0;
                    oracle += cov.abs();
                }
            }
        }
        assert!(((g - oracle) / g).abs() < 1e-6, "{g} vs {oracle}");
    }

    #[test]
    fn screen_off_prefers_true_cause_over_noise() {
        let (a, c) = one_cause_market(33, 400, 4, 1, 0.3);
        let g_true = score_gs_with(&a, &["X1".into()], &c, GsEstimator::ScreenOff).unwrap();
        let g_noise = score_gs_with(&a, &["X2".into()], &c, GsEstimator::ScreenOff).unwrap();
        assert!(g_true < g_noise, "{g_true} !< {g_noise}");
    }

    #[test]
    fn greedy_single_step_equals_argmin() {
        let (a, c) = one_cause_market(2, 150, 3, 3, 0.4);
        for est in [GsEstimator::FittedCovariance, GsEstimator::ScreenOff] {
            let cfg = SelectionConfig { m: 1, mode: SelectionMode::GreedyGs, estimator: est, ..Default::default() };
            let card = select_greedy_gs(&a, &c, &cfg).unwrap();
            let scores: Vec<f64> =
                c.names().iter().map(|n| score_gs_with(&a, std::slice::from_ref(n), &c, est).unwrap()).collect();
            let argmin = (0..scores.len()).min_by(|&i, &j| scores[i].total_cmp(&scores[j])).unwrap();
            assert_eq!(card.selected, vec![c.names()[argmin].clone()]);
            assert!(card.constraint_satisfied.is_some());
        }
    }

    /// Two blocks of assets, each driven by its own factor; candidates [Z1, Z2, N1, N2].
    fn two_cause_market(seed: u64, t: usize) -> (ReturnPanel, ReturnPanel) {
        let mut s = NormalStream::new(seed, 0);
        let z1: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let z2: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let mut assets = Vec::new();
        for (k, z) in [&z1, &z1, &z2, &z2].iter().enumerate() {
            let b = 0.8 + 0.2 * k as f64;
            assets.push(z.iter().map(|v| b * v + 0.3 * s.normal()).collect::<Vec<f64>>());
        }
        let n1: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        let n2: Vec<f64> = (0..t).map(|_| s.normal()).collect();
        (panel("Y", &assets), panel("X", &[z1, z2, n1, n2]))
    }

    #[test]
    fn greedy_matches_exhaustive_pair_search() {
        let (a, c) = two_cause_market(41, 400);
        let est = GsEstimator::ScreenOff;
        let cfg = SelectionConfig { m: 2, mode: SelectionMode::GreedyGs, estimator: est, ..Default::default() };
        let card = select_greedy_gs(&a, &c, &cfg).unwrap();
        let mut best = (f64::INFINITY, vec![]);
        for pair in combinations(4, 2) {
            let subset: Vec<String> = pair.iter().map(|&k| c.names()[k].clone()).collect();
            let g = score_gs_with(&a, &subset, &c, est).unwrap();
            if g < best.0 {
                best = (g, subset);
            }
        }
        let mut got = card.selected.clone();
        got.sort();
        assert_eq!(got, best.1);
        assert!((card.objective.unwrap() - best.0).abs() < 1e-12);
        assert_eq!(got, vec!["X1", "X2"]);
    }

    #[test]
    fn dp_never_worse_than_greedy_on_additive_cost() {
        for seed in 0..6 {
            let (a, c) = two_cause_market(seed, 200);
            for est in [GsEstimator::FittedCovariance, GsEstimator::ScreenOff] {
                let base = SelectionConfig { m: 2, estimator: est, ..Default::default() };
                let greedy = select_greedy_gs(&a, &c, &SelectionConfig { mode: SelectionMode::GreedyGs, ..base.clone() }).unwrap();
                let delta = |n: &String| score_gs_with(&a, std::slice::from_ref(n), &c, est).unwrap();
                let greedy_cost: f64 = greedy.selected.iter().map(delta).sum();
                let dp = select_dp_gs(
                    &a,
                    &c,
                    &SelectionConfig { m: greedy.selected.len(), mode: SelectionMode::DpGs, ..base },
                )
                .unwrap();
                assert!(dp.objective.unwrap() <= greedy_cost + 1e-12);
                let dp_cost: f64 = dp.selected.iter().map(delta).sum();
                assert!((dp_cost - dp.objective.unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_theorem_holds_across_fixtures() {
        for seed in 0..20 {
            let (a, c) = one_cause_market(100 + seed, 300, 3, 2, 0.4);
            let subset = vec!["X1".to_string(), "X3".to_string()];
            let g = score_gs(&a, &subset, &c).unwrap();
            let x = with_intercept(&subset_matrix(&c, &[0, 2]));
            let qr = x.clone().qr();
            let yhat: Vec<DMatrix<f64>> = (0..3)
                .map(|i| {
                    let y = DMatrix::from_column_slice(300, 1, a.column(i).as_slice());
                    let b = qr.r().solve_upper_triangular(&(qr.q().transpose() * y)).unwrap();
                    &x * b
                })
                .collect();
            let mut oracle = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        let (mi, mj) = (yhat[i].mean(), yhat[j].mean());
                        let cov = yhat[i].iter().zip(yhat[j].iter()).map(|(p, q)| (p - mi) * (q - mj)).sum::<f64>() / 300.0;
                        oracle += cov.abs();
                    }
                }
            }
            assert!(((g - oracle) / g).abs() < 1e-3, "seed {seed}: {g} vs {oracle}");
        }
    }

    #[test]
    fn single_absolute_value_form_is_a_lower_bound() {
        // |Σ d_ij| ≤ Σ |d_ij|: the per-pair form dominates the single-absolute form.
        let (a, c) = two_cause_market(7, 200);
        let design = with_intercept(&subset_matrix(&c, &[0]));
        let beta = least_squares_multi(&design, a.values(), GS_RIDGE, GS_RIDGE).unwrap();
        let fitted = &design * beta;
        let n = a.n_cols();
        let mut signed = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let (mi, mj) = (fitted.column(i).mean(), fitted.column(j).mean());
                    signed += fitted.column(i).dot(&fitted.column(j)) / 200.0 - mi * mj;
                }
            }
        }
        let g = score_gs(&a, &["X1".into()], &c).unwrap();
        assert!(signed.abs() <= g + 1e-12);
    }

    #[test]
    fn dp_picks_smallest_deltas() {
        let deltas = [0.5, 0.1, 0.9, 0.1, 0.3];
        let dp = dp_select(&deltas, 3).unwrap();
        assert_eq!(dp.chosen, vec![1, 3, 4]);
        assert!((dp.table[5][3] - 0.5).abs() < 1e-15);
        let all = dp_select(&deltas, 5).unwrap();
        assert_eq!(all.chosen, vec![0, 1, 2, 3, 4]);
        assert!((all.table[5][5] - deltas.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn dp_table_guard() {
        assert!(matches!(dp_select(&vec![0.0; 2000], 600), Err(Error::TableTooLarge { .. })));
    }

    #[test]
    fn ml_single_asset_matches_univariate_normal() {
        let (a, c) = one_cause_market(9, 120, 1, 0, 0.5);
        let z = subset_matrix(&c, &[0]);
        let model = MlCauseModel::fit(a.values(), &z).unwrap();
        let ll = model.log_likelihood(a.values(), &z).unwrap();
        // Oracle: closed-form univariate normal with variance α²Var(Z) + σ²_ε.
        let var = model.alpha[(0, 0)].powi(2) * model.cause_variance[0] + model.noise_variance[0];
        let y = a.column(0);
        let zc = c.column(0);
        let ss: f64 = (0..120)
            .map(|t| (y[t] - model.intercepts[0] - model.alpha[(0, 0)] * zc[t]).powi(2))
            .sum();
        let oracle = -60.0 * (2.0 * std::f64::consts::PI * var).ln() - ss / (2.0 * var);
        assert!((ll - oracle).abs() < 1e-9 * oracle.abs());
    }

    #[test]
    fn ml_zero_loadings_give_independent_marginals() {
        let (a, c) = one_cause_market(10, 80, 3, 0, 0.5);
        let z = subset_matrix(&c, &[0]);
        let mut model = MlCauseModel::fit(a.values(), &z).unwrap();
        model.alpha.fill(0.0);
        let corr = model.implied_correlation();
        assert_eq!(corr[(0, 1)], 0.0);
        let ll = model.log_likelihood(a.values(), &z).unwrap();
        let oracle: f64 = (0..3)
            .map(|i| {
                let v = model.noise_variance[i];
                let ss: f64 = a.column(i).iter().map(|y| (y - model.intercepts[i]).powi(2)).sum();
                -40.0 * (2.0 * std::f64::consts::PI * v).ln() - ss / (2.0 * v)
            })
            .sum();
        assert!((ll - oracle).abs() < 1e-9 * oracle.abs());
    }

    #[test]
    fn ml_selects_true_cause() {
        let (a, c) = one_cause_market(14, 300, 2, 1, 0.5);
        for exhaustive in [false, true] {
            let cfg = SelectionConfig { m: 1, mode: SelectionMode::MaxLikelihood, exhaustive, ..Default::default() };
            let card = select_max_likelihood(&a, &c, &cfg).unwrap();
            assert_eq!(card.selected, vec!["X1"]);
            assert!(card.log_likelihood.unwrap().is_finite());
        }
    }

    #[test]
    fn implied_variance_decomposes() {
        let (a, c) = one_cause_market(15, 200, 3, 1, 0.4);
        let z = subset_matrix(&c, &[0, 1]);
        let model = MlCauseModel::fit(a.values(), &z).unwrap();
        let cov = model.implied_covariance();
        for i in 0..3 {
            let expect: f64 =
                (0..2).map(|k| model.alpha[(i, k)].powi(2) * model.cause_variance[k]).sum::<f64>() + model.noise_variance[i];
            assert!((cov[(i, i)] - expect).abs() < 1e-15);
        }
        let rho = model.implied_correlation();
        assert!(rho[(0, 1)].abs() < 1.0);
    }

    #[test]
    fn invalid_m_is_rejected() {
        let (a, c) = one_cause_market(1, 50, 2, 1, 0.2);
        assert!(select_rccp_rank(&a, &c, &SelectionConfig { m: 3, ..Default::default() }).is_err());
        assert!(select_rccp_rank(&a, &c, &SelectionConfig { m: 0, ..Default::default() }).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn scorecard_recomputable(seed in 0u64..1000, eps in 0.0f64..1.0) {
                let mut s = NormalStream::new(seed, 0);
                let c = DMatrix::from_fn(5, 4, |_, _| s.uniform() * 2.0 - 1.0);
                let card = scorecard_from_correlation(&names("X", 5), &names("Y", 4), &c, eps, 2, &[]).unwrap();
                for k in 0..5 {
                    let r: usize = (0..4).map(|i| usize::from(c[(k, i)].abs() >= eps - THRESHOLD_TOLERANCE)).sum();
                    prop_assert_eq!(r, card.repeatedness[k]);
                    let st: f64 = (0..4).map(|i| c[(k, i)].abs() * f64::from(card.relevance[(k, i)])).sum();
                    prop_assert!((st - card.strength[k]).abs() < 1e-12);
                }
                for w in card.ranking.windows(2) {
                    let a = card.candidates.iter().position(|n| *n == w[0]).unwrap();
                    let b = card.candidates.iter().position(|n| *n == w[1]).unwrap();
                    prop_assert!((card.repeatedness[a], card.strength[a]) >= (card.repeatedness[b], card.strength[b]));
                }
            }

            #[test]
            fn rank_invariant_to_positive_affine_maps(seed in 0u64..200, scale in 0.01f64..100.0, shift in -5.0f64..5.0) {
                let (a, c) = one_cause_market(seed, 60, 3, 3, 1.0);
                let cfg = SelectionConfig { m: 2, epsilon: 0.2, ..Default::default() };
                let base = select_rccp_rank(&a, &c, &cfg).unwrap();
                let cols: Vec<Vec<f64>> = (0..c.n_cols()).map(|k| c.column(k).iter().map(|v| v * scale + shift).collect()).collect();
                let moved = select_rccp_rank(&a, &panel("X", &cols), &cfg).unwrap();
                prop_assert_eq!(base.ranking, moved.ranking);
            }

            #[test]
            fn excluded_never_selected(seed in 0u64..200, drop in 0usize..4) {
                let (a, c) = one_cause_market(seed, 80, 3, 3, 0.5);
                let name = c.names()[drop].clone();
                for mode in [SelectionMode::RccpRank, SelectionMode::GreedyGs, SelectionMode::DpGs, SelectionMode::MaxLikelihood] {
                    let cfg = SelectionConfig { m: 2, epsilon: 0.1, mode, exclude: vec![name.clone()], ..Default::default() };
                    let card = select_drivers(&a, &c, &cfg).unwrap();
                    prop_assert!(!card.selected.contains(&name));
                }
            }
        }
    }
}
