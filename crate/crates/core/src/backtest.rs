//! Walk-forward rebalancing engine, NAV accounting and performance metrics.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::allocation::hierarchical::{choose_drivers, trailing, LinkageInput};
use crate::allocation::{
    cvar_optimize, hrp_weights, hsp_weights, max_sharpe_weights, min_variance_weights, qp_distance_weights, solve_qp,
    Bounds, CovEstimate, CvarProblem, HspConfig, WeightVector,
};
use crate::error::{Error, Result};
use crate::market_data::ReturnPanel;
use crate::par;
use crate::sde_paths::{path_dependent_hsp, rebalance_seed, PathHspConfig};
use crate::sensitivity_geometry::sensitivity_distance;

pub const PERIODS_PER_YEAR: f64 = 252.0;
/// Annualised volatility below which Sharpe is reported as 0.
pub const DEGENERATE_VOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Hsp,
    PathHsp,
    Hrp,
    EqualWeight,
    MinVol,
    MaxSharpe,
    QuadraticUtility,
    TargetReturn,
    QpDistance,
    Cvar,
}

impl Method {
    pub const BENCHMARKS: [Method; 6] =
        [Method::EqualWeight, Method::MinVol, Method::MaxSharpe, Method::QuadraticUtility, Method::TargetReturn, Method::Hrp];

    pub fn label(self) -> &'static str {
        match self {
            Method::Hsp => "hsp",
            Method::PathHsp => "path-hsp",
            Method::Hrp => "hrp",
            Method::EqualWeight => "equal-weight",
            Method::MinVol => "min-vol",
            Method::MaxSharpe => "max-sharpe",
            Method::QuadraticUtility => "quadratic-utility",
            Method::TargetReturn => "target-return",
            Method::QpDistance => "qp-distance",
            Method::Cvar => "cvar",
        }
    }

    fn uses_drivers(self) -> bool {
        matches!(self, Method::Hsp | Method::PathHsp | Method::QpDistance)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Hsp,
            Method::PathHsp,
            Method::Hrp,
            Method::EqualWeight,
            Method::MinVol,
            Method::MaxSharpe,
            Method::QuadraticUtility,
            Method::TargetReturn,
            Method::QpDistance,
            Method::Cvar,
        ]
        .into_iter()
        .find(|m| m.label() == s)
        .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holding {
    /// Positions fixed between rebalances; weights drift with prices.
    #[default]
    BuyAndHold,
    /// Weights reset to target every period.
    ConstantWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub rebalance_stride: usize,
    pub driver_stride: usize,
    pub bounds: Option<(f64, f64)>,
    /// First eligible rebalance date; earlier rows only feed the lookback.
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    pub initial_nav: f64,
    pub holding: Holding,
    pub cost_bps: f64,
    /// Trailing rows for covariance and mean estimates of the benchmarks.
    pub cov_window: usize,
    /// Rows of history required before the first rebalance; `None` derives it from the configs.
    pub warmup: Option<usize>,
    pub hsp: HspConfig,
    pub path: PathHspConfig,
    pub risk_aversion: f64,
    /// Daily target return; `None` uses the mean of the trailing asset means.
    pub target_return: Option<f64>,
    pub qp_lambda: f64,
    pub cvar_alpha: f64,
    pub seed: u64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            rebalance_stride: 21,
            driver_stride: 126,
            bounds: Some((0.03, 0.10)),
            start: None,
            end: None,
            initial_nav: 100.0,
            holding: Holding::BuyAndHold,
            cost_bps: 0.0,
            cov_window: 63,
            warmup: None,
            hsp: HspConfig::default(),
            path: PathHspConfig::default(),
            risk_aversion: 1.0,
            target_return: None,
            qp_lambda: 1.0,
            cvar_alpha: 0.95,
            seed: 7,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self, n_assets: usize) -> Result<()> {
        if self.rebalance_stride == 0 || self.driver_stride == 0 {
            return Err(Error::InvalidInput("strides must be at least 1".into()));
        }
        if !(self.initial_nav > 0.0) || self.cost_bps < 0.0 || !(self.risk_aversion > 0.0) {
            return Err(Error::InvalidInput("initial NAV and risk aversion must be positive, costs non-negative".into()));
        }
        if !(self.cvar_alpha > 0.0 && self.cvar_alpha < 1.0) || self.cov_window < 2 {
            return Err(Error::InvalidInput("cvar_alpha must lie in (0,1) and cov_window be at least 2".into()));
        }
        self.bounds_for(n_assets).check(n_assets)
    }

    pub fn bounds_for(&self, n: usize) -> Bounds {
        match self.bounds {
            Some((l, u)) => Bounds::uniform(n, l, u),
            None => Bounds::long_only(n),
        }
    }

    fn hsp_config(&self) -> HspConfig {
        HspConfig { bounds: self.bounds, ..self.hsp.clone() }
    }

    fn path_config(&self, k: usize) -> PathHspConfig {
        PathHspConfig { hsp: self.hsp_config(), seed: rebalance_seed(self.seed, k), ..self.path.clone() }
    }

    /// Rows of history the given methods need before a decision.
    pub fn required_history(&self, methods: &[Method]) -> usize {
        if let Some(w) = self.warmup {
            return w;
        }
        let lag = self.hsp.sensitivity.lag;
        let mut need = self.cov_window;
        for m in methods {
            need = need.max(match m {
                Method::Hsp | Method::QpDistance => (self.hsp.fit_window + lag).max(self.hsp.cov_window),
                Method::PathHsp => {
                    let p = &self.path;
                    (p.series_window + lag + p.stride * p.series_length.saturating_sub(1))
                        .max(self.hsp.fit_window)
                        .max(self.hsp.cov_window)
                }
                _ => self.cov_window,
            });
        }
        need
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub total_return: f64,
    pub ann_vol: f64,
    pub sharpe: f64,
    /// Volatility was (numerically) zero and Sharpe was set to 0.
    pub degenerate: bool,
}

pub fn metrics(nav: &[f64], periods_per_year: f64) -> Result<Metrics> {
    if nav.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: nav.len() });
    }
    if nav.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("NAV must be positive and finite".into()));
    }
    let rets: Vec<f64> = nav.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let n = rets.len() as f64;
    let mean = rets.iter().sum::<f64>() / n;
    let var = if rets.len() > 1 { rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let ann_vol = var.sqrt() * periods_per_year.sqrt();
    let degenerate = ann_vol < DEGENERATE_VOL;
    Ok(Metrics {
        total_return: nav[nav.len() - 1] / nav[0] - 1.0,
        ann_vol,
        sharpe: if degenerate { 0.0 } else { mean * periods_per_year / ann_vol },
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rebalance {
    pub date: NaiveDate,
    pub weights: WeightVector,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub drivers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestResult {
    pub label: String,
    /// `dates[0]` is the last date before the first rebalance, where NAV equals the initial value.
    pub dates: Vec<NaiveDate>,
    pub nav: Vec<f64>,
    pub rebalances: Vec<Rebalance>,
    pub metrics: Metrics,
}

impl BacktestResult {
    pub fn write_nav_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Csv { path: "<nav>".into(), reason: e.to_string() };
        w.write_record(["date", "nav"]).map_err(io)?;
        for (d, v) in self.dates.iter().zip(&self.nav) {
            w.write_record([d.to_string(), format!("{v:.10}")]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io { path: "<nav>".into(), source: e })
    }

    pub fn write_weights_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Csv { path: "<weights>".into(), reason: e.to_string() };
        let names = self.rebalances.first().map(|r| r.weights.names.clone()).unwrap_or_default();
        let mut header = vec!["date".to_string()];
        header.extend(names);
        w.write_record(&header).map_err(io)?;
        for r in &self.rebalances {
            let mut row = vec![r.date.to_string()];
            row.extend(r.weights.weights.iter().map(|x| format!("{x:.12}")));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io { path: "<weights>".into(), source: e })
    }
}

fn mean_returns(panel: &ReturnPanel) -> Vec<f64> {
    let t = panel.n_rows() as f64;
    (0..panel.n_cols()).map(|j| panel.values().column(j).sum() / t).collect()
}

/// `argmin wᵀΣw` subject to `μᵀw ≥ target`, via bisection on the multiplier of
/// the return constraint. Falls back to the highest-return frontier point when
/// the target is out of reach.
fn target_return_weights(cov: &CovEstimate, mu: &[f64], target: f64, bounds: &Bounds) -> Result<Vec<f64>> {
    let frontier = |nu: f64| -> Result<Vec<f64>> {
        let c: Vec<f64> = mu.iter().map(|m| -nu * m).collect();
        Ok(solve_qp(&cov.matrix, Some(&c), bounds, 1e-12, 200_000)?.weights)
    };
    let ret = |w: &[f64]| w.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>();
    let w0 = frontier(0.0)?;
    if ret(&w0) >= target {
        return Ok(w0);
    }
    let scale = cov.matrix.trace() / cov.len() as f64 / mu.iter().fold(1e-300f64, |a, m| a.max(m.abs()));
    let mut hi = scale;
    let mut w_hi = frontier(hi)?;
    let mut doublings = 0;
    while ret(&w_hi) < target && doublings < 60 {
        hi *= 2.0;
        w_hi = frontier(hi)?;
        doublings += 1;
    }
    if ret(&w_hi) < target {
        return Ok(w_hi);
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let w = frontier(mid)?;
        if ret(&w) >= target {
            hi = mid;
            w_hi = w;
        } else {
            lo = mid;
        }
    }
    Ok(w_hi)
}

/// Driver state carried between rebalances for driver-based methods.
struct DriverState {
    drivers: Option<Vec<String>>,
}

fn decide(
    method: Method,
    history_assets: &ReturnPanel,
    history_candidates: Option<&ReturnPanel>,
    cfg: &BacktestConfig,
    k: usize,
    state: &mut DriverState,
    reselect: bool,
) -> Result<(WeightVector, Vec<String>)> {
    let n = history_assets.n_cols();
    let bounds = cfg.bounds_for(n);
    let names = history_assets.names().to_vec();
    let window = || trailing(history_assets, cfg.cov_window);
    let with_bounds = |w: Vec<f64>| WeightVector::new(names.clone(), w, Some(bounds.clone()));
    if method.uses_drivers() {
        let cands = history_candidates.ok_or_else(|| Error::InvalidInput(format!("{} needs a driver panel", method.label())))?;
        let hsp = cfg.hsp_config();
        if reselect || state.drivers.is_none() {
            state.drivers = Some(choose_drivers(history_assets, cands, &hsp, None)?.0);
        }
        let drivers = state.drivers.clone().unwrap_or_default();
        let w = match method {
            Method::Hsp => hsp_weights(history_assets, cands, &hsp, Some(&drivers))?.weights,
            Method::PathHsp => path_dependent_hsp(history_assets, cands, &cfg.path_config(k), Some(&drivers))?.weights,
            _ => {
                let res = hsp_weights(history_assets, cands, &hsp, Some(&drivers))?;
                let sens = res.sensitivities.ok_or_else(|| Error::InvalidInput("missing sensitivities".into()))?;
                let d = sensitivity_distance(&sens)?;
                let cov = CovEstimate::from_returns(&trailing(history_assets, hsp.cov_window)?)?;
                qp_distance_weights(&d, &bounds, cfg.qp_lambda, Some(&cov))?.0
            }
        };
        return Ok((w, drivers));
    }
    let w = match method {
        Method::EqualWeight => with_bounds(bounds.project(&vec![1.0 / n as f64; n]))?,
        Method::Hrp => hrp_weights(&window()?, Some(&bounds), LinkageInput::ColumnEuclidean)?.weights,
        Method::MinVol => min_variance_weights(&CovEstimate::from_returns(&window()?)?, &bounds)?.0,
        Method::MaxSharpe => {
            let win = window()?;
            max_sharpe_weights(&CovEstimate::from_returns(&win)?, &mean_returns(&win), 0.0, &bounds)?.0
        }
        Method::QuadraticUtility => {
            let win = window()?;
            let cov = CovEstimate::from_returns(&win)?;
            let c: Vec<f64> = mean_returns(&win).iter().map(|m| -m).collect();
            let sol = solve_qp(&(&cov.matrix * (0.5 * cfg.risk_aversion)), Some(&c), &bounds, 1e-12, 200_000)?;
            with_bounds(sol.weights)?
        }
        Method::TargetReturn => {
            let win = window()?;
            let mu = mean_returns(&win);
            let target = cfg.target_return.unwrap_or(mu.iter().sum::<f64>() / n as f64);
            with_bounds(target_return_weights(&CovEstimate::from_returns(&win)?, &mu, target, &bounds)?)?
        }
        Method::Cvar => {
            let win = window()?;
            let p = CvarProblem::new(names.clone(), win.values().clone(), cfg.cvar_alpha, bounds.clone())?;
            cvar_optimize(&p)?.weights
        }
        Method::Hsp | Method::PathHsp | Method::QpDistance => unreachable!("driver methods handled above"),
    };
    Ok((w, vec![]))
}

/// Row of the first rebalance and the exclusive end row.
fn schedule(assets: &ReturnPanel, cfg: &BacktestConfig, methods: &[Method]) -> Result<(usize, usize)> {
    let need = cfg.required_history(methods).max(2);
    let mut first = need;
    if let Some(s) = cfg.start {
        first = first.max(assets.dates().partition_point(|d| *d < s));
    }
    let end = match cfg.end {
        Some(e) => assets.dates().partition_point(|d| *d <= e),
        None => assets.n_rows(),
    };
    if first >= end {
        return Err(Error::InsufficientHistory { needed: first + 1, available: end });
    }
    Ok((first, end))
}

/// Walk forward over `assets`: at every `rebalance_stride`-th row `τ` from the
/// first eligible row, choose weights from rows strictly before `τ`, then hold
/// them through the following period.
pub fn run_backtest(
    assets: &ReturnPanel,
    candidates: Option<&ReturnPanel>,
    cfg: &BacktestConfig,
    method: Method,
) -> Result<BacktestResult> {
    let n = assets.n_cols();
    cfg.validate(n)?;
    assets.ensure_complete()?;
    if let Some(c) = candidates {
        if c.dates() != assets.dates() {
            return Err(Error::ShapeMismatch("asset and driver panels must share a date index".into()));
        }
        c.ensure_complete()?;
    }
    let (first, end) = schedule(assets, cfg, &[method])?;
    let values = assets.values();
    let mut nav = vec![cfg.initial_nav];
    let mut dates = vec![assets.dates()[first - 1]];
    let mut rebalances = Vec::new();
    let mut state = DriverState { drivers: None };
    let mut holdings = vec![0.0; n];
    let mut target = vec![0.0; n];
    let cost = cfg.cost_bps * 1e-4;
    for t in first..end {
        let offset = t - first;
        let mut level = *nav.last().unwrap_or(&cfg.initial_nav);
        if offset % cfg.rebalance_stride == 0 {
            let k = offset / cfg.rebalance_stride;
            let reselect = offset % cfg.driver_stride == 0;
            let hist_a = assets.rows(0, t);
            let hist_c = candidates.map(|c| c.rows(0, t));
            let (w, drivers) = decide(method, &hist_a, hist_c.as_ref(), cfg, k, &mut state, reselect)?;
            if !w.is_valid() {
                return Err(Error::InvalidInput(format!("{} produced weights violating the simplex or bounds", method.label())));
            }
            let turnover: f64 = w.weights.iter().zip(&holdings).map(|(a, b)| (a - b).abs()).sum();
            level *= 1.0 - cost * turnover;
            holdings = w.weights.clone();
            target = w.weights.clone();
            rebalances.push(Rebalance { date: assets.dates()[t], weights: w, drivers });
        } else if cfg.holding == Holding::ConstantWeights {
            holdings = target.clone();
        }
        let r: Vec<f64> = (0..n).map(|j| values[(t, j)]).collect();
        let rp: f64 = holdings.iter().zip(&r).map(|(w, x)| w * x).sum();
        let next = level * (1.0 + rp);
        if !(next > 0.0) || !next.is_finite() {
            return Err(Error::InvalidInput(format!("NAV became non-positive at {}", assets.dates()[t])));
        }
        nav.push(next);
        dates.push(assets.dates()[t]);
        for (h, x) in holdings.iter_mut().zip(&r) {
            *h *= (1.0 + x) / (1.0 + rp);
        }
    }
    let metrics = metrics(&nav, PERIODS_PER_YEAR)?;
    Ok(BacktestResult { label: method.label().into(), dates, nav, rebalances, metrics })
}

/// Several methods on a shared schedule (the longest warm-up among them), run in parallel.
pub fn run_methods(
    assets: &ReturnPanel,
    candidates: Option<&ReturnPanel>,
    cfg: &BacktestConfig,
    methods: &[Method],
) -> Result<Vec<BacktestResult>> {
    let shared = BacktestConfig { warmup: Some(cfg.required_history(methods)), ..cfg.clone() };
    par::map_slice(methods, |m| run_backtest(assets, candidates, &shared, *m)).into_iter().collect()
}

pub fn run_benchmarks(assets: &ReturnPanel, cfg: &BacktestConfig) -> Result<Vec<BacktestResult>> {
    run_methods(assets, None, cfg, &Method::BENCHMARKS)
}
