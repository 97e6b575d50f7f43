//! Recursive bisection over a quasi-diagonal order, and the HSP / HRP pipelines
//! that produce that order.

use serde::{Deserialize, Serialize};

use super::{Bounds, CovEstimate, WeightVector, WEIGHT_TOL};
use crate::driver_selection::{select_drivers, SelectionConfig, SelectionScorecard};
use crate::error::{Error, Result};
use crate::market_data::ReturnPanel;
use crate::sensitivity_geometry::{
    column_distance, correlation_distance, nearest_psd, sensitivity_distance, single_linkage, DistanceMatrix,
    LinkageTree,
};
use crate::sensitivity_models::{estimate_sensitivities, SensitivityConfig, SensitivityMatrix};

/// Variance of a cluster under inverse-variance weights inside the cluster.
fn cluster_variance(cov: &CovEstimate, members: &[usize]) -> f64 {
    let inv: Vec<f64> = members.iter().map(|&i| 1.0 / cov.matrix[(i, i)]).collect();
    let total: f64 = inv.iter().sum();
    let w: Vec<f64> = inv.iter().map(|v| v / total).collect();
    let mut var = 0.0;
    for (a, &i) in members.iter().enumerate() {
        for (b, &j) in members.iter().enumerate() {
            var += w[a] * w[b] * cov.matrix[(i, j)];
        }
    }
    var
}

/// Clip to the box and hand the excess (or shortfall) to the unclipped assets
/// in proportion to their weights, until nothing moves. Falls back to the
/// Euclidean projection if the proportional scheme cannot settle.
pub fn clip_and_redistribute(weights: &[f64], bounds: &Bounds) -> Result<Vec<f64>> {
    let n = weights.len();
    bounds.check(n)?;
    let mut w = weights.to_vec();
    let mut pinned = vec![false; n];
    for _ in 0..=n {
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && (w[i] < bounds.lower[i] || w[i] > bounds.upper[i]) {
                w[i] = w[i].clamp(bounds.lower[i], bounds.upper[i]);
                pinned[i] = true;
                changed = true;
            }
        }
        let fixed: f64 = (0..n).filter(|&i| pinned[i]).map(|i| w[i]).sum();
        let free_sum: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| w[i]).sum();
        let target = 1.0 - fixed;
        if free_sum > 0.0 {
            let scale = target / free_sum;
            for i in (0..n).filter(|&i| !pinned[i]) {
                w[i] *= scale;
            }
        }
        if !changed {
            break;
        }
    }
    let ok = (w.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_TOL
        && w.iter().zip(bounds.lower.iter().zip(&bounds.upper)).all(|(x, (l, u))| *x >= l - WEIGHT_TOL && *x <= u + WEIGHT_TOL);
    Ok(if ok { w } else { bounds.project(&w) })
}

/// Top-down bisection of `order`: each segment is split at its midpoint and the
/// halves receive `α₁ = 1 − σ₁/(σ₁+σ₂)` and `1 − α₁` of the segment's weight.
/// Bounds, when given, are applied after the recursion.
pub fn recursive_bisection(cov: &CovEstimate, order: &[usize], bounds: Option<&Bounds>) -> Result<WeightVector> {
    let n = cov.len();
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::InvalidInput("leaf order is not a permutation of the assets".into()));
    }
    for i in 0..n {
        if cov.matrix[(i, i)] <= 0.0 {
            return Err(Error::ZeroVariance(cov.names[i].clone()));
        }
    }
    let mut w = vec![1.0; n];
    let mut segments: Vec<&[usize]> = vec![order];
    while !segments.is_empty() {
        let mut next = Vec::new();
        for seg in segments {
            if seg.len() < 2 {
                continue;
            }
            let (left, right) = seg.split_at(seg.len() / 2);
            let (v1, v2) = (cluster_variance(cov, left), cluster_variance(cov, right));
            let alpha = 1.0 - v1 / (v1 + v2);
            for &i in left {
                w[i] *= alpha;
            }
            for &i in right {
                w[i] *= 1.0 - alpha;
            }
            next.push(left);
            next.push(right);
        }
        segments = next;
    }
    let w = match bounds {
        Some(b) => clip_and_redistribute(&w, b)?,
        None => w,
    };
    WeightVector::new(cov.names.clone(), w, bounds.cloned())
}

/// What single linkage consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkageInput {
    /// Entries of the (repaired) distance matrix are the pairwise distances.
    Direct,
    /// Euclidean distance between columns of the (repaired) matrix.
    #[default]
    ColumnEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HspConfig {
    pub selection: SelectionConfig,
    pub sensitivity: SensitivityConfig,
    /// Trailing rows used for driver selection and model fitting.
    pub fit_window: usize,
    /// Trailing rows used for the covariance fed to recursive bisection.
    pub cov_window: usize,
    pub psd_repair: bool,
    pub psd_tol: f64,
    pub linkage: LinkageInput,
    /// Uniform `(lower, upper)` weight bounds.
    pub bounds: Option<(f64, f64)>,
}

impl Default for HspConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            sensitivity: SensitivityConfig::default(),
            fit_window: 84,
            cov_window: 63,
            psd_repair: false,
            psd_tol: 1e-10,
            linkage: LinkageInput::ColumnEuclidean,
            bounds: None,
        }
    }
}

impl HspConfig {
    pub fn bounds_for(&self, n: usize) -> Option<Bounds> {
        self.bounds.map(|(l, u)| Bounds::uniform(n, l, u))
    }
}

#[derive(Debug, Clone)]
pub struct HspResult {
    pub weights: WeightVector,
    pub drivers: Vec<String>,
    pub scorecard: Option<SelectionScorecard>,
    pub sensitivities: Option<SensitivityMatrix>,
    /// Matrix handed to clustering (after the optional PSD repair).
    pub distance: DistanceMatrix,
    pub tree: LinkageTree,
}

pub(crate) fn trailing(panel: &ReturnPanel, rows: usize) -> Result<ReturnPanel> {
    if panel.n_rows() < rows {
        return Err(Error::InsufficientHistory { needed: rows, available: panel.n_rows() });
    }
    Ok(panel.rows(panel.n_rows() - rows, panel.n_rows()))
}

/// Leaf order from a distance matrix under the configured repair and linkage input.
pub fn order_from_distance(d: &DistanceMatrix, cfg: &HspConfig) -> Result<(DistanceMatrix, LinkageTree)> {
    let repaired = if cfg.psd_repair { nearest_psd(d, cfg.psd_tol)? } else { d.clone() };
    let tree = match cfg.linkage {
        LinkageInput::Direct => single_linkage(&repaired)?,
        LinkageInput::ColumnEuclidean => single_linkage(&column_distance(&repaired)?)?,
    };
    Ok((repaired, tree))
}

/// Recursive bisection on `cov` in the order induced by `d`.
pub fn hsp_from_distance(d: &DistanceMatrix, cov: &CovEstimate, cfg: &HspConfig) -> Result<(WeightVector, DistanceMatrix, LinkageTree)> {
    if d.names != cov.names {
        return Err(Error::ShapeMismatch("distance and covariance cover different assets".into()));
    }
    let (repaired, tree) = order_from_distance(d, cfg)?;
    let w = recursive_bisection(cov, &tree.leaf_order, cfg.bounds_for(cov.len()).as_ref())?;
    Ok((w, repaired, tree))
}

pub fn hsp_from_sensitivities(
    s: &SensitivityMatrix,
    cov: &CovEstimate,
    cfg: &HspConfig,
) -> Result<(WeightVector, DistanceMatrix, LinkageTree)> {
    hsp_from_distance(&sensitivity_distance(s)?, cov, cfg)
}

/// Drivers picked on the trailing fit window, or `fixed` when given.
pub(crate) fn choose_drivers(
    assets: &ReturnPanel,
    candidates: &ReturnPanel,
    cfg: &HspConfig,
    fixed: Option<&[String]>,
) -> Result<(Vec<String>, Option<SelectionScorecard>)> {
    match fixed {
        Some(d) => Ok((d.to_vec(), None)),
        None => {
            let sel_cfg = SelectionConfig { window: None, ..cfg.selection.clone() };
            let card = select_drivers(&trailing(assets, cfg.fit_window)?, &trailing(candidates, cfg.fit_window)?, &sel_cfg)?;
            Ok((card.selected.clone(), Some(card)))
        }
    }
}

/// Full pipeline on panels holding only information available at the decision
/// time: select drivers (unless `fixed_drivers` is given), fit per-asset models
/// on the trailing fit window, order assets by sensitivity distance, and bisect
/// the trailing covariance.
pub fn hsp_weights(
    assets: &ReturnPanel,
    candidates: &ReturnPanel,
    cfg: &HspConfig,
    fixed_drivers: Option<&[String]>,
) -> Result<HspResult> {
    let lag = cfg.sensitivity.lag;
    let fit_assets = trailing(assets, cfg.fit_window + lag)?;
    let fit_candidates = trailing(candidates, cfg.fit_window + lag)?;
    let (drivers, scorecard) = choose_drivers(assets, candidates, cfg, fixed_drivers)?;
    let driver_panel = fit_candidates.select(&drivers)?;
    let (sens, _) = estimate_sensitivities(&fit_assets, &driver_panel, None, &cfg.sensitivity)?;
    let cov = CovEstimate::from_returns(&trailing(assets, cfg.cov_window)?)?;
    let (weights, distance, tree) = hsp_from_sensitivities(&sens, &cov, cfg)?;
    Ok(HspResult { weights, drivers, scorecard, sensitivities: Some(sens), distance, tree })
}

/// Hierarchical Risk Parity on a return window: correlation distance, single
/// linkage, recursive bisection.
pub fn hrp_weights(returns: &ReturnPanel, bounds: Option<&Bounds>, linkage: LinkageInput) -> Result<HspResult> {
    let cov = CovEstimate::from_returns(returns)?;
    let d = correlation_distance(&cov.names, &cov.correlation())?;
    let cfg = HspConfig { psd_repair: false, linkage, ..Default::default() };
    let (_, tree) = order_from_distance(&d, &cfg)?;
    let weights = recursive_bisection(&cov, &tree.leaf_order, bounds)?;
    Ok(HspResult { weights, drivers: vec![], scorecard: None, sensitivities: None, distance: d, tree })
}
