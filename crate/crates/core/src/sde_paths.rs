//! Mean-reverting models for sensitivity series: calibration, Euler–Maruyama
//! ensembles, per-step distance matrices and path-dependent HSP.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::allocation::hierarchical::{choose_drivers, trailing};
use crate::allocation::{recursive_bisection, CovEstimate, HspConfig, WeightVector};
use crate::error::{Error, Result};
use crate::market_data::ReturnPanel;
use crate::par;
use crate::rng::{derive_seed, NormalStream};
use crate::sensitivity_geometry::{aggregate_trajectory, sensitivity_distance, DistanceMatrix, LinkageTree, TrajectoryMode};
use crate::sensitivity_models::{estimate_sensitivities, SensitivityMatrix};

pub const MIN_CALIBRATION_LEN: usize = 30;
const EXPLOSIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeModel {
    #[default]
    Vasicek,
    HullWhite,
    ArimaAr1,
    LocalVolLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeParams {
    pub model: SdeModel,
    pub kappa: f64,
    pub theta: f64,
    /// Time-varying level used by Hull–White, indexed by simulation step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub theta_t: Vec<f64>,
    pub sigma: f64,
    pub dt: f64,
    /// Local-vol diffusion `α + βt`.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
}

impl SdeParams {
    pub fn vasicek(kappa: f64, theta: f64, sigma: f64, dt: f64) -> Self {
        Self { model: SdeModel::Vasicek, kappa, theta, theta_t: vec![], sigma, dt, alpha: 0.0, beta: 0.0 }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        let finite = [self.kappa, self.theta, self.sigma, self.dt, self.alpha, self.beta].iter().all(|v| v.is_finite());
        if !finite || self.kappa < 0.0 || self.sigma < 0.0 || !(self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("invalid SDE parameters {self:?}")));
        }
        if self.model == SdeModel::HullWhite && self.theta_t.len() < horizon {
            return Err(Error::InvalidInput(format!(
                "Hull-White level path has {} entries, horizon is {horizon}",
                self.theta_t.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub params: SdeParams,
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub resid_std: f64,
    pub n_obs: usize,
    /// `|slope| > 1`: the fitted recursion does not revert; κ was floored at 0.
    pub explosive: bool,
}

struct Ols {
    slope: f64,
    intercept: f64,
    slope_se: f64,
    resid: Vec<f64>,
}

fn ols(x: &[f64], y: &[f64]) -> Ols {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    // A flat regressor carries no slope information; treat it as white noise around `my`.
    let slope = if sxx > 1e-300 * n { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let s2 = resid.iter().map(|r| r * r).sum::<f64>() / (n - 2.0).max(1.0);
    let slope_se = if sxx > 0.0 { (s2 / sxx).sqrt() } else { f64::INFINITY };
    Ols { slope, intercept, slope_se, resid }
}

fn rolling_mean(xs: &[f64], span: usize) -> Vec<f64> {
    xs.windows(span).map(|w| w.iter().sum::<f64>() / span as f64).collect()
}

/// Fit `model` to a sensitivity series sampled every `dt`. `hw_span` is the
/// rolling-mean span for the Hull–White level path.
pub fn calibrate(series: &[f64], model: SdeModel, dt: f64, hw_span: usize) -> Result<Calibration> {
    if series.len() < MIN_CALIBRATION_LEN {
        return Err(Error::TooShort { needed: MIN_CALIBRATION_LEN, got: series.len() });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("calibration series must be finite".into()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let (x, y) = (&series[..series.len() - 1], &series[1..]);
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let mut params = SdeParams { model, ..SdeParams::vasicek(0.0, mean, 0.0, dt) };
    let (fit, resid_std) = match model {
        SdeModel::LocalVolLinear => {
            // S_{n+1} = S_n(1 − κΔt) + S_n(α + βt_n)√Δt ζ: slope through the origin, then
            // |standardised residual| regressed on time, scaled by E|ζ| = √(2/π).
            let sxx: f64 = x.iter().map(|v| v * v).sum();
            let slope = if sxx > 0.0 { x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sxx } else { 1.0 };
            let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - slope * a).collect();
            let floor = 1e-8 * series.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let (ts, zs): (Vec<f64>, Vec<f64>) = x
                .iter()
                .zip(&resid)
                .enumerate()
                .filter(|(_, (s, _))| s.abs() > floor)
                .map(|(k, (s, r))| (k as f64 * dt, (r / (s * dt.sqrt())).abs() / (2.0 / std::f64::consts::PI).sqrt()))
                .unzip();
            if ts.len() >= 3 {
                let vol = ols(&ts, &zs);
                params.alpha = vol.intercept;
                params.beta = vol.slope;
            }
            let n = resid.len() as f64;
            let s2 = resid.iter().map(|r| r * r).sum::<f64>() / (n - 1.0);
            let slope_se = (s2 / sxx.max(f64::MIN_POSITIVE)).sqrt();
            (Ols { slope, intercept: 0.0, slope_se, resid }, s2.sqrt())
        }
        _ => {
            let fit = ols(x, y);
            let n = fit.resid.len() as f64;
            let rs = (fit.resid.iter().map(|r| r * r).sum::<f64>() / (n - 2.0)).sqrt();
            (fit, rs)
        }
    };
    let explosive = fit.slope.abs() > 1.0 + EXPLOSIVE_TOL;
    params.kappa = ((1.0 - fit.slope) / dt).max(0.0);
    params.sigma = resid_std / dt.sqrt();
    if model != SdeModel::LocalVolLinear {
        params.theta = if params.kappa * dt > 1e-12 { fit.intercept / (params.kappa * dt) } else { mean };
    }
    if model == SdeModel::HullWhite {
        if hw_span == 0 || hw_span > series.len() {
            return Err(Error::InvalidInput(format!("Hull-White span {hw_span} outside 1..={}", series.len())));
        }
        params.theta_t = rolling_mean(series, hw_span);
    }
    Ok(Calibration {
        params,
        slope: fit.slope,
        intercept: fit.intercept,
        slope_se: fit.slope_se,
        resid_std,
        n_obs: x.len(),
        explosive,
    })
}

/// One Euler–Maruyama step from step index `k`.
fn step(p: &SdeParams, s: f64, k: usize, z: f64) -> f64 {
    let sq = p.dt.sqrt();
    match p.model {
        SdeModel::Vasicek | SdeModel::ArimaAr1 => s + p.kappa * (p.theta - s) * p.dt + p.sigma * sq * z,
        SdeModel::HullWhite => s + p.kappa * (p.theta_t[k] - s) * p.dt + p.sigma * sq * z,
        SdeModel::LocalVolLinear => {
            let t = k as f64 * p.dt;
            s * (1.0 - p.kappa * p.dt) + s * (p.alpha + p.beta * t) * sq * z
        }
    }
}

fn simulate_path(p: &SdeParams, s0: f64, horizon: usize, rng: &mut NormalStream) -> Vec<f64> {
    let mut path = Vec::with_capacity(horizon + 1);
    let mut s = s0;
    path.push(s);
    for k in 0..horizon {
        s = step(p, s, k, rng.normal());
        path.push(s);
    }
    path
}

/// `n_paths × (horizon + 1)` Euler–Maruyama paths starting at `s0`; path `k`
/// draws from stream `k` of `seed`.
pub fn simulate(p: &SdeParams, s0: f64, horizon: usize, n_paths: usize, seed: u64) -> Result<DMatrix<f64>> {
    simulate_streams(p, s0, horizon, n_paths, seed, 0)
}

fn simulate_streams(p: &SdeParams, s0: f64, horizon: usize, n_paths: usize, seed: u64, base: u64) -> Result<DMatrix<f64>> {
    if horizon == 0 || n_paths == 0 {
        return Err(Error::InvalidInput("horizon and n_paths must be positive".into()));
    }
    if !s0.is_finite() {
        return Err(Error::InvalidInput("initial value must be finite".into()));
    }
    p.validate(horizon)?;
    let rows = par::map_range(n_paths, |k| simulate_path(p, s0, horizon, &mut NormalStream::new(seed, base + k as u64)));
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("simulation produced non-finite values".into()));
    }
    Ok(DMatrix::from_fn(n_paths, horizon + 1, |r, c| rows[r][c]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Each (asset, driver) pair has its own shocks.
    #[default]
    Independent,
    /// Every pair reuses the same shocks path by path.
    Common,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub assets: Vec<String>,
    pub drivers: Vec<String>,
    pub n_paths: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Asset-major: pair `(i, j)` at `i * drivers.len() + j`.
    pub params: Vec<SdeParams>,
    /// `n_paths × (horizon + 1)` per pair, same indexing as `params`.
    pub paths: Vec<DMatrix<f64>>,
}

impl PathEnsemble {
    pub fn pair(&self, asset: usize, driver: usize) -> &DMatrix<f64> {
        &self.paths[asset * self.drivers.len() + driver]
    }
}

/// Simulate every (asset, driver) sensitivity from its current value `s0[(i, j)]`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ensemble(
    assets: Vec<String>,
    drivers: Vec<String>,
    params: Vec<SdeParams>,
    s0: &DMatrix<f64>,
    horizon: usize,
    n_paths: usize,
    seed: u64,
    noise: NoiseMode,
) -> Result<PathEnsemble> {
    let (n, m) = (assets.len(), drivers.len());
    if s0.shape() != (n, m) || params.len() != n * m {
        return Err(Error::ShapeMismatch(format!(
            "{n} assets x {m} drivers with {} parameter sets and initial values {:?}",
            params.len(),
            s0.shape()
        )));
    }
    let paths = (0..n * m)
        .map(|p| {
            let base = match noise {
                NoiseMode::Independent => (p as u64) << 32,
                NoiseMode::Common => 0,
            };
            simulate_streams(&params[p], s0[(p / m, p % m)], horizon, n_paths, seed, base)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble { assets, drivers, n_paths, horizon, seed, params, paths })
}

/// For each step `1..=horizon`: mean sensitivity across paths, then pairwise
/// Euclidean distance over assets.
pub fn trajectory_distance_matrices(e: &PathEnsemble) -> Result<Vec<DistanceMatrix>> {
    let (n, m) = (e.assets.len(), e.drivers.len());
    if e.paths.len() != n * m || e.paths.iter().any(|p| p.shape() != (e.n_paths, e.horizon + 1)) {
        return Err(Error::ShapeMismatch("ensemble paths do not match its dimensions".into()));
    }
    let means: Vec<Vec<f64>> = e.paths.iter().map(|p| p.row_mean().iter().copied().collect()).collect();
    (1..=e.horizon)
        .map(|t| {
            let values = DMatrix::from_fn(n, m, |i, j| means[i * m + j][t]);
            sensitivity_distance(&SensitivityMatrix::new(e.assets.clone(), e.drivers.clone(), values)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathHspConfig {
    pub hsp: HspConfig,
    pub model: SdeModel,
    /// Step of the sensitivity series and of the simulation, in years.
    pub dt: f64,
    /// Rows per refit when building historical sensitivity series.
    pub series_window: usize,
    /// Number of refits (points in each sensitivity series).
    pub series_length: usize,
    pub stride: usize,
    pub hw_span: usize,
    pub horizon: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub noise: NoiseMode,
}

impl Default for PathHspConfig {
    fn default() -> Self {
        Self {
            hsp: HspConfig::default(),
            model: SdeModel::Vasicek,
            dt: 1.0 / 252.0,
            series_window: 42,
            series_length: 60,
            stride: 1,
            hw_span: 10,
            horizon: 21,
            n_paths: 500,
            seed: 7,
            noise: NoiseMode::Independent,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathHspResult {
    pub weights: WeightVector,
    pub drivers: Vec<String>,
    pub calibrations: Vec<Calibration>,
    /// Current sensitivities (last point of each series).
    pub current: SensitivityMatrix,
    /// Cumulative distance matrix handed to clustering (after optional repair).
    pub distance: DistanceMatrix,
    pub tree: LinkageTree,
}

/// Sensitivity matrices refit on sliding windows; the last entry uses the most recent rows.
pub fn sensitivity_series(assets: &ReturnPanel, drivers: &ReturnPanel, cfg: &PathHspConfig) -> Result<Vec<SensitivityMatrix>> {
    if cfg.series_window < 3 || cfg.stride == 0 || cfg.series_length == 0 {
        return Err(Error::InvalidInput("series window must be ≥ 3 and stride, length positive".into()));
    }
    let lag = cfg.hsp.sensitivity.lag;
    let span = cfg.series_window + lag + cfg.stride * (cfg.series_length - 1);
    let a = trailing(assets, span)?;
    let d = trailing(drivers, span)?;
    par::try_map_range(cfg.series_length, |k| {
        let start = k * cfg.stride;
        let end = start + cfg.series_window + lag;
        estimate_sensitivities(&a.rows(start, end), &d.rows(start, end), None, &cfg.hsp.sensitivity).map(|(s, _)| s)
    })
}

/// Path-dependent ordering from given per-pair parameters and current
/// sensitivities, then recursive bisection on `cov`.
pub fn path_hsp_from_params(
    current: &SensitivityMatrix,
    params: Vec<SdeParams>,
    cov: &CovEstimate,
    cfg: &PathHspConfig,
) -> Result<(WeightVector, DistanceMatrix, LinkageTree)> {
    if cov.names != current.assets {
        return Err(Error::ShapeMismatch("covariance and sensitivities cover different assets".into()));
    }
    let ens = simulate_ensemble(
        current.assets.clone(),
        current.drivers.clone(),
        params,
        &current.values,
        cfg.horizon,
        cfg.n_paths,
        cfg.seed,
        cfg.noise,
    )?;
    let cumulative = aggregate_trajectory(&trajectory_distance_matrices(&ens)?, TrajectoryMode::Cumulative)?;
    let (repaired, tree) = crate::allocation::hierarchical::order_from_distance(&cumulative, &cfg.hsp)?;
    let w = recursive_bisection(cov, &tree.leaf_order, cfg.hsp.bounds_for(cov.len()).as_ref())?;
    Ok((w, repaired, tree))
}

/// Select drivers, build historical sensitivity series, calibrate one SDE per
/// (asset, driver), simulate forward and run HSP on the cumulative trajectory
/// distance.
pub fn path_dependent_hsp(
    assets: &ReturnPanel,
    candidates: &ReturnPanel,
    cfg: &PathHspConfig,
    fixed_drivers: Option<&[String]>,
) -> Result<PathHspResult> {
    let (drivers, _) = choose_drivers(assets, candidates, &cfg.hsp, fixed_drivers)?;
    let driver_panel = candidates.select(&drivers)?;
    let series = sensitivity_series(assets, &driver_panel, cfg)?;
    let current = series.last().cloned().ok_or(Error::InvalidInput("empty sensitivity series".into()))?;
    let (n, m) = (current.n_assets(), drivers.len());
    let calibrations = par::try_map_range(n * m, |p| {
        let xs: Vec<f64> = series.iter().map(|s| s.values[(p / m, p % m)]).collect();
        let mut c = calibrate(&xs, cfg.model, cfg.dt, cfg.hw_span)?;
        if c.params.model == SdeModel::HullWhite {
            // Most recent stretch of the rolling level drives the forecast.
            let tt = &c.params.theta_t;
            c.params.theta_t = tt[tt.len().saturating_sub(cfg.horizon)..].to_vec();
        }
        Ok::<_, Error>(c)
    })?;
    let params = calibrations.iter().map(|c| c.params.clone()).collect();
    let cov = CovEstimate::from_returns(&trailing(assets, cfg.hsp.cov_window)?)?;
    let (weights, distance, tree) = path_hsp_from_params(&current, params, &cov, cfg)?;
    Ok(PathHspResult { weights, drivers, calibrations, current, distance, tree })
}

/// Seed for the `k`-th rebalance of a run seeded with `seed`.
pub fn rebalance_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, &format!("rebalance-{k}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::hsp_from_sensitivities;
    use crate::driver_selection::SelectionConfig;
    use crate::sensitivity_geometry::single_linkage;
    use crate::synth::{two_cluster_market, TwoClusterSpec};

    #[test]
    fn noiseless_unit_step() {
        let p = SdeParams::vasicek(1.0, 0.0, 0.0, 1.0);
        let path = simulate(&p, 1.0, 5, 1, 0).unwrap();
        assert_eq!(path.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn noiseless_matches_recursion_exactly() {
        let cases = [
            SdeParams::vasicek(0.7, 0.3, 0.0, 0.1),
            SdeParams { model: SdeModel::HullWhite, theta_t: (0..8).map(|k| 0.1 * k as f64).collect(), ..SdeParams::vasicek(1.5, 0.0, 0.0, 0.2) },
            SdeParams { model: SdeModel::LocalVolLinear, alpha: 0.0, beta: 0.0, ..SdeParams::vasicek(0.4, 0.0, 0.0, 0.5) },
        ];
        for p in cases {
            let sim = simulate(&p, 2.0, 8, 3, 11).unwrap();
            let mut s = 2.0f64;
            for k in 0..8 {
                s = match p.model {
                    SdeModel::HullWhite => s + p.kappa * (p.theta_t[k] - s) * p.dt,
                    SdeModel::LocalVolLinear => s * (1.0 - p.kappa * p.dt),
                    _ => s + p.kappa * (p.theta - s) * p.dt,
                };
                for r in 0..3 {
                    assert_eq!(sim[(r, k + 1)], s);
                }
            }
        }
    }

    #[test]
    fn reproducible_and_stream_separated() {
        let p = SdeParams::vasicek(2.0, 0.05, 0.1, 1.0 / 252.0);
        let a = simulate(&p, 0.0, 50, 4, 9).unwrap();
        assert_eq!(a, simulate(&p, 0.0, 50, 4, 9).unwrap());
        assert_ne!(a.row(0), a.row(1));
        assert_ne!(a, simulate(&p, 0.0, 50, 4, 10).unwrap());
    }

    #[test]
    fn constant_series_calibrates_to_level() {
        let c = calibrate(&[0.42; 40], SdeModel::Vasicek, 1.0 / 252.0, 5).unwrap();
        assert!((c.params.theta - 0.42).abs() < 1e-12);
        assert_eq!(c.params.sigma, 0.0);
        assert!(!c.explosive);
    }

    #[test]
    fn white_noise_calibration() {
        let mut rng = NormalStream::new(3, 0);
        let xs: Vec<f64> = (0..2000).map(|_| 0.5 + 0.2 * rng.normal()).collect();
        let c = calibrate(&xs, SdeModel::ArimaAr1, 1.0, 5).unwrap();
        assert!(c.slope.abs() < 3.0 * c.slope_se);
        assert!((c.params.kappa - 1.0).abs() < 3.0 * c.slope_se);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((c.params.theta - mean).abs() < 3.0 * 0.2 / (xs.len() as f64).sqrt());
    }

    #[test]
    fn too_short_and_explosive() {
        assert!(matches!(calibrate(&[1.0; 29], SdeModel::Vasicek, 1.0, 5), Err(Error::TooShort { .. })));
        let grow: Vec<f64> = (0..40).map(|k| 1.05f64.powi(k)).collect();
        let c = calibrate(&grow, SdeModel::Vasicek, 1.0, 5).unwrap();
        assert!(c.explosive);
        assert_eq!(c.params.kappa, 0.0);
        assert!(c.params.theta.is_finite());
    }

    #[test]
    fn vasicek_round_trip() {
        let p = SdeParams::vasicek(2.0, 0.05, 0.1, 1.0 / 252.0);
        let path = simulate(&p, 0.05, 50_000, 1, 7).unwrap();
        let xs: Vec<f64> = path.row(0).iter().copied().collect();
        let c = calibrate(&xs, SdeModel::Vasicek, p.dt, 5).unwrap();
        for (got, want) in [(c.params.kappa, 2.0), (c.params.theta, 0.05), (c.params.sigma, 0.1)] {
            assert!((got / want - 1.0).abs() < 0.10, "{got} vs {want}");
        }
    }

    #[test]
    fn local_vol_calibration_recovers_diffusion() {
        let p = SdeParams { model: SdeModel::LocalVolLinear, alpha: 0.3, beta: 0.0, ..SdeParams::vasicek(0.5, 0.0, 0.0, 1.0 / 252.0) };
        let path = simulate(&p, 1.0, 5000, 1, 8).unwrap();
        let xs: Vec<f64> = path.row(0).iter().copied().collect();
        let c = calibrate(&xs, SdeModel::LocalVolLinear, p.dt, 5).unwrap();
        assert!((c.params.alpha + c.params.beta * 10.0 - 0.3).abs() < 0.03, "{:?}", c.params);
        assert!(c.params.beta.abs() < 0.01);
    }

    #[test]
    fn stationary_moments() {
        let p = SdeParams::vasicek(2.0, 0.05, 0.1, 1.0 / 252.0);
        let n = 20_000;
        let paths = simulate(&p, 0.05, 1000, n, 21).unwrap();
        let last: Vec<f64> = paths.column(1000).iter().copied().collect();
        let mean = last.iter().sum::<f64>() / n as f64;
        let var = last.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let stat = 0.1f64.powi(2) / (2.0 * 2.0);
        assert!((mean - 0.05).abs() < 3.0 * (stat / n as f64).sqrt());
        assert!((var / stat - 1.0).abs() < 0.10);
    }

    #[test]
    fn mean_trajectory_reverts() {
        let p = SdeParams::vasicek(3.0, 1.0, 0.5, 0.01);
        let n = 4000;
        let paths = simulate(&p, 0.0, 60, n, 5).unwrap();
        for t in [10, 30, 60] {
            let col: Vec<f64> = paths.column(t).iter().copied().collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let expect = 1.0 - (1.0 - 3.0 * 0.01f64).powi(t as i32);
            assert!((m - expect).abs() < 3.0 * sd / (n as f64).sqrt());
        }
    }

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn single_step_single_path_is_pass_through() {
        let params = vec![SdeParams::vasicek(1.0, 0.0, 0.3, 0.1); 6];
        let s0 = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.5, -0.1, 1.0, 0.0]);
        let e = simulate_ensemble(names("A", 3), names("D", 2), params, &s0, 1, 1, 4, NoiseMode::Independent).unwrap();
        let ds = trajectory_distance_matrices(&e).unwrap();
        assert_eq!(ds.len(), 1);
        let step = DMatrix::from_fn(3, 2, |i, j| e.pair(i, j)[(0, 1)]);
        let direct = sensitivity_distance(&SensitivityMatrix::new(names("A", 3), names("D", 2), step).unwrap()).unwrap();
        assert_eq!(ds[0].values, direct.values);
    }

    #[test]
    fn common_noise_identical_assets_are_coincident() {
        let params = vec![SdeParams::vasicek(1.0, 0.2, 0.3, 0.1); 4];
        let s0 = DMatrix::from_element(2, 2, 0.5);
        let e = simulate_ensemble(names("A", 2), names("D", 2), params, &s0, 5, 20, 4, NoiseMode::Common).unwrap();
        for d in trajectory_distance_matrices(&e).unwrap() {
            assert_eq!(d.values, DMatrix::zeros(2, 2));
        }
    }

    #[test]
    fn deterministic_distance_matches_recursion() {
        let params = vec![SdeParams::vasicek(0.5, 0.0, 0.0, 0.1), SdeParams::vasicek(2.0, 0.0, 0.0, 0.1)];
        let s0 = DMatrix::from_element(2, 1, 1.0);
        let e = simulate_ensemble(names("A", 2), names("D", 1), params, &s0, 6, 3, 1, NoiseMode::Independent).unwrap();
        let ds = trajectory_distance_matrices(&e).unwrap();
        let (mut a, mut b) = (1.0f64, 1.0f64);
        for d in &ds {
            a += 0.5 * (0.0 - a) * 0.1;
            b += 2.0 * (0.0 - b) * 0.1;
            assert!((d.values[(0, 1)] - (a - b).abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn cumulative_is_horizon_times_mean() {
        let params = vec![SdeParams::vasicek(1.0, 0.2, 0.3, 0.1); 8];
        let s0 = DMatrix::from_fn(4, 2, |i, j| 0.1 * (i + j) as f64);
        let e = simulate_ensemble(names("A", 4), names("D", 2), params, &s0, 8, 50, 2, NoiseMode::Independent).unwrap();
        let ds = trajectory_distance_matrices(&e).unwrap();
        let cum = aggregate_trajectory(&ds, TrajectoryMode::Cumulative).unwrap();
        let mean = aggregate_trajectory(&ds, TrajectoryMode::Mean).unwrap();
        assert_eq!(cum.values, &mean.values * 8.0);
        assert_eq!(single_linkage(&cum).unwrap().leaf_order, single_linkage(&mean).unwrap().leaf_order);
    }

    #[test]
    fn noiseless_single_step_equals_plain_hsp() {
        let n = 6;
        let current = SensitivityMatrix::new(
            names("A", n),
            names("D", 2),
            DMatrix::from_fn(n, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.4),
        )
        .unwrap();
        let kappas = [0.3, 1.2, 0.8, 2.0, 0.1, 1.5];
        let params: Vec<SdeParams> = (0..n * 2).map(|p| SdeParams::vasicek(kappas[p / 2], 0.2 * (p % 3) as f64, 0.0, 0.1)).collect();
        let cov = CovEstimate::new(
            names("A", n),
            DMatrix::from_fn(n, n, |i, j| if i == j { 0.01 * (i + 1) as f64 } else { 0.002 }),
        )
        .unwrap();
        let cfg = PathHspConfig { horizon: 1, n_paths: 3, ..Default::default() };
        let (w, _, _) = path_hsp_from_params(&current, params.clone(), &cov, &cfg).unwrap();
        let forecast = DMatrix::from_fn(n, 2, |i, j| {
            let p = &params[i * 2 + j];
            current.values[(i, j)] + p.kappa * (p.theta - current.values[(i, j)]) * p.dt
        });
        let fs = SensitivityMatrix::new(names("A", n), names("D", 2), forecast).unwrap();
        let (plain, _, _) = hsp_from_sensitivities(&fs, &cov, &cfg.hsp).unwrap();
        assert_eq!(w.weights, plain.weights);
        let other = PathHspConfig { seed: 99, ..cfg };
        assert_eq!(path_hsp_from_params(&current, params, &cov, &other).unwrap().0.weights, w.weights);
    }

    #[test]
    fn two_cluster_grouping() {
        let mut grouped = 0;
        for seed in 0..20 {
            let spec = TwoClusterSpec { seed, ..Default::default() };
            let m = two_cluster_market(&spec).unwrap();
            let mut cfg = PathHspConfig { n_paths: 200, ..Default::default() };
            cfg.hsp.selection = SelectionConfig { m: 2, epsilon: 0.3, ..Default::default() };
            let res = path_dependent_hsp(&m.assets, &m.candidates, &cfg, None).unwrap();
            let labels: Vec<usize> = res.tree.leaf_order.iter().map(|&i| m.cluster[i]).collect();
            if labels.windows(2).filter(|p| p[0] != p[1]).count() == 1 {
                grouped += 1;
            }
            assert!(res.weights.is_valid());
        }
        assert!(grouped >= 19, "{grouped}/20");
    }
}
