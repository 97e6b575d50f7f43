use std::fs::File;
use std::path::{Path, PathBuf};

use hsp_core::allocation::hierarchical::{hsp_from_distance, order_from_distance};
use hsp_core::allocation::mapping::sensitivity_scenarios;
use hsp_core::allocation::qp::{closed_form_distance_weights, max_sharpe_weights, min_variance_weights, qp_distance_weights};
use hsp_core::allocation::{cvar_optimize, hrp_weights, hsp_weights, Bounds, CovEstimate, CvarProblem, WeightVector};
use hsp_core::backtest::{run_methods, Method};
use hsp_core::driver_selection::{select_drivers, SelectionConfig, SelectionMode, SelectionScorecard};
use hsp_core::market_data::{read_panel_file, ReturnPanel};
use hsp_core::sde_paths::{path_dependent_hsp, simulate_ensemble, trajectory_distance_matrices, SdeModel};
use hsp_core::sensitivity_geometry::{kernelize, sensitivity_distance, DistanceMatrix, LinkageTree, Metric};
use hsp_core::sensitivity_models::{estimate_sensitivities, ModelKind, SensitivityMatrix};
use hsp_core::synth::two_cluster_market;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{OptimizeMethod, RunConfig, SCHEMA_VERSION};
use crate::error::CliError;
use crate::output::OutputDir;

/// Where the selected drivers come from.
#[derive(Debug, Clone, Default)]
pub struct DriverSource {
    pub drivers: Option<Vec<String>>,
    pub selection: Option<PathBuf>,
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: OutputDir,
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    let p = p.as_deref().ok_or_else(|| CliError::config("<config>", format!("no {what} file given (flag or [data] section)")))?;
    if !p.is_file() {
        return Err(CliError::config(p, format!("{what} file does not exist")));
    }
    Ok(p)
}

fn existing(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::config(p, format!("{what} file does not exist")))
    }
}

impl Context {
    fn assets(&self) -> Result<ReturnPanel, CliError> {
        let p = require(&self.cfg.data.assets, "assets")?;
        Ok(read_panel_file(p, self.cfg.data.kind, self.cfg.data.align)?)
    }

    fn candidates(&self) -> Result<ReturnPanel, CliError> {
        let p = require(&self.cfg.data.candidates, "candidates")?;
        Ok(read_panel_file(p, self.cfg.data.kind, self.cfg.data.align)?)
    }

    /// Both panels restricted to their common dates.
    fn panels(&self) -> Result<(ReturnPanel, ReturnPanel), CliError> {
        let a = self.assets()?;
        let c = self.candidates()?;
        if a.dates() == c.dates() {
            return Ok((a, c));
        }
        let common: Vec<_> = a.dates().iter().filter(|d| c.dates().binary_search(d).is_ok()).copied().collect();
        let pick = |p: &ReturnPanel| -> Result<ReturnPanel, CliError> {
            let rows: Vec<usize> = common.iter().map(|d| p.row_of(*d)).collect::<hsp_core::Result<_>>()?;
            let values = nalgebra::DMatrix::from_fn(rows.len(), p.n_cols(), |r, j| p.values()[(rows[r], j)]);
            Ok(ReturnPanel::new(common.clone(), p.names().to_vec(), values)?)
        };
        Ok((pick(&a)?, pick(&c)?))
    }

    fn fit_window(&self, panel: &ReturnPanel) -> usize {
        self.cfg.data.fit_window.unwrap_or(panel.n_rows())
    }

    fn selection_config(&self) -> SelectionConfig {
        self.cfg.selection.clone()
    }

    fn run_selection(&self, assets: &ReturnPanel, candidates: &ReturnPanel) -> Result<SelectionScorecard, CliError> {
        let w = self.fit_window(assets);
        Ok(select_drivers(&trailing(assets, w)?, &trailing(candidates, w)?, &self.selection_config())?)
    }

    fn drivers(&self, src: &DriverSource, assets: &ReturnPanel, candidates: &ReturnPanel) -> Result<Vec<String>, CliError> {
        if let Some(d) = &src.drivers {
            return Ok(d.clone());
        }
        if let Some(p) = &src.selection {
            return read_selection(p);
        }
        Ok(self.run_selection(assets, candidates)?.selected)
    }

    fn distance(&self, path: &Path) -> Result<DistanceMatrix, CliError> {
        existing(path, "distance")?;
        let metric = match self.cfg.geometry.kernel_sigma {
            Some(sigma) => Metric::Kernel { sigma },
            None => Metric::Euclidean,
        };
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        Ok(DistanceMatrix::read_csv(f, &path.display().to_string(), metric)?)
    }

    fn covariance(&self, assets: &ReturnPanel, names: Option<&[String]>) -> Result<CovEstimate, CliError> {
        let panel = match names {
            Some(n) => assets.select(n)?,
            None => assets.clone(),
        };
        Ok(CovEstimate::from_returns(&trailing(&panel, self.cfg.allocation.cov_window)?)?)
    }

    fn bounds(&self, n: usize) -> Bounds {
        match self.cfg.allocation.bounds {
            Some((l, u)) => Bounds::uniform(n, l, u),
            None => Bounds::long_only(n),
        }
    }
}

fn trailing(panel: &ReturnPanel, rows: usize) -> Result<ReturnPanel, CliError> {
    if rows > panel.n_rows() {
        return Err(hsp_core::Error::InsufficientHistory { needed: rows, available: panel.n_rows() }.into());
    }
    Ok(panel.rows(panel.n_rows() - rows, panel.n_rows()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub schema_version: u32,
    pub mode: SelectionMode,
    pub assets: Vec<String>,
    pub candidates: Vec<String>,
    pub ranking: Vec<String>,
    pub selected: Vec<String>,
    pub excluded: Vec<String>,
    pub repeatedness: Vec<usize>,
    pub strength: Vec<f64>,
    pub objective: Option<f64>,
    pub constraint_satisfied: Option<bool>,
    pub log_likelihood: Option<f64>,
}

fn read_selection(path: &Path) -> Result<Vec<String>, CliError> {
    existing(path, "selection")?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let a: SelectionArtifact = serde_json::from_str(&text).map_err(|e| CliError::config(path, e.to_string()))?;
    if a.selected.is_empty() {
        return Err(CliError::config(path, "selection lists no drivers"));
    }
    Ok(a.selected)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn weights_rows(w: &WeightVector) -> Vec<Vec<String>> {
    w.names.iter().zip(&w.weights).map(|(n, x)| vec![n.clone(), fmt(*x)]).collect()
}

fn linkage_json(d: &DistanceMatrix, tree: &LinkageTree) -> serde_json::Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "names": d.names,
        "metric": d.metric,
        "psd_repaired": d.psd_repaired,
        "leaf_order": tree.leaf_order,
        "leaf_names": tree.leaf_order.iter().map(|&i| d.names[i].clone()).collect::<Vec<_>>(),
        "merges": tree.merges,
    })
}

pub fn select(ctx: &mut Context) -> Result<(), CliError> {
    let (assets, candidates) = ctx.panels()?;
    let card = ctx.run_selection(&assets, &candidates)?;
    let rows: Vec<Vec<String>> = card
        .candidates
        .iter()
        .enumerate()
        .map(|(k, c)| {
            vec![
                c.clone(),
                card.rank_of(c).map_or(String::new(), |r| (r + 1).to_string()),
                card.repeatedness[k].to_string(),
                fmt(card.strength[k]),
                card.selected.contains(c).to_string(),
                card.excluded.contains(c).to_string(),
            ]
        })
        .collect();
    ctx.out.write_csv_rows("scorecard.csv", &["candidate", "rank", "repeatedness", "strength", "selected", "excluded"], &rows)?;
    let artifact = SelectionArtifact {
        schema_version: SCHEMA_VERSION,
        mode: card.mode,
        assets: card.assets.clone(),
        candidates: card.candidates.clone(),
        ranking: card.ranking.clone(),
        selected: card.selected.clone(),
        excluded: card.excluded.clone(),
        repeatedness: card.repeatedness.clone(),
        strength: card.strength.clone(),
        objective: card.objective,
        constraint_satisfied: card.constraint_satisfied,
        log_likelihood: card.log_likelihood,
    };
    ctx.out.write_json("selection.json", &artifact)?;
    Ok(())
}

pub fn fit(ctx: &mut Context, src: &DriverSource) -> Result<(), CliError> {
    let (assets, candidates) = ctx.panels()?;
    let drivers = ctx.drivers(src, &assets, &candidates)?;
    let scfg = ctx.cfg.sensitivity_config();
    let rows = (ctx.fit_window(&assets) + scfg.lag).min(assets.n_rows());
    let a = trailing(&assets, rows)?;
    let d = trailing(&candidates, rows)?.select(&drivers)?;
    let (sens, reports) = estimate_sensitivities(&a, &d, None, &scfg)?;
    ctx.out.write_with("sensitivities.csv", |b| sens.write_csv(b))?;
    ctx.out.write_json(
        "fit_report.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "model": scfg.model,
            "lag": scfg.lag,
            "rows": rows,
            "first_date": a.dates().first(),
            "last_date": a.dates().last(),
            "drivers": drivers,
            "reports": reports,
        }),
    )?;
    Ok(())
}

pub fn distance(ctx: &mut Context, sensitivities: &Path) -> Result<(), CliError> {
    existing(sensitivities, "sensitivities")?;
    let f = File::open(sensitivities).map_err(|e| CliError::io(sensitivities, e))?;
    let s = SensitivityMatrix::read_csv(f, &sensitivities.display().to_string())?;
    let mut d = sensitivity_distance(&s)?;
    if let Some(sigma) = ctx.cfg.geometry.kernel_sigma {
        d = kernelize(&d, sigma)?;
    }
    let hcfg = ctx.cfg.hsp_config(0);
    let (repaired, tree) = order_from_distance(&d, &hcfg)?;
    ctx.out.write_with("distance.csv", |b| repaired.write_csv(b))?;
    let mut link = linkage_json(&repaired, &tree);
    link["linkage_input"] = json!(hcfg.linkage);
    ctx.out.write_json("linkage.json", &link)?;
    Ok(())
}

pub struct OptimizeInputs {
    pub distance: Option<PathBuf>,
    pub sensitivities: Option<PathBuf>,
    pub drivers: DriverSource,
}

pub fn optimize(ctx: &mut Context, inputs: &OptimizeInputs) -> Result<(), CliError> {
    let method = ctx.cfg.allocation.method;
    let alloc = ctx.cfg.allocation.clone();
    let dist = inputs.distance.as_deref().map(|p| ctx.distance(p)).transpose()?;
    let needs_distance = matches!(method, OptimizeMethod::ClosedForm | OptimizeMethod::Qp);
    if needs_distance && dist.is_none() {
        return Err(CliError::config("<flags>", "this method needs --distance"));
    }
    let names = dist.as_ref().map(|d| d.names.clone());
    let (weights, diagnostics) = match method {
        OptimizeMethod::ClosedForm => {
            let d = dist.as_ref().expect("checked above");
            let w = closed_form_distance_weights(d, alloc.inverse)?;
            (w, json!({ "inverse": alloc.inverse }))
        }
        OptimizeMethod::Qp => {
            let d = dist.as_ref().expect("checked above");
            let cov = match &ctx.cfg.data.assets {
                Some(_) => Some(ctx.covariance(&ctx.assets()?, names.as_deref())?),
                None => None,
            };
            let (w, sol) = qp_distance_weights(d, &ctx.bounds(d.len()), alloc.lambda, cov.as_ref())?;
            let diag = json!({
                "lambda": alloc.lambda,
                "uses_covariance": cov.is_some(),
                "objective": sol.objective,
                "kkt_residual": sol.kkt_residual,
                "iterations": sol.iterations,
                "converged": sol.converged,
            });
            (w, diag)
        }
        OptimizeMethod::Hsp => match &dist {
            Some(d) => {
                let cov = ctx.covariance(&ctx.assets()?, names.as_deref())?;
                let (w, repaired, tree) = hsp_from_distance(d, &cov, &ctx.cfg.hsp_config(0))?;
                (w, json!({ "source": "distance", "linkage": linkage_json(&repaired, &tree) }))
            }
            None => {
                let (assets, candidates) = ctx.panels()?;
                let lag = ctx.cfg.sensitivity.lag;
                let fit_window = ctx.cfg.data.fit_window.unwrap_or(assets.n_rows().saturating_sub(lag));
                let fixed = match (&inputs.drivers.drivers, &inputs.drivers.selection) {
                    (Some(d), _) => Some(d.clone()),
                    (None, Some(p)) => Some(read_selection(p)?),
                    _ => None,
                };
                let r = hsp_weights(&assets, &candidates, &ctx.cfg.hsp_config(fit_window), fixed.as_deref())?;
                let diag = json!({
                    "source": "pipeline",
                    "drivers": r.drivers,
                    "linkage": linkage_json(&r.distance, &r.tree),
                });
                (r.weights, diag)
            }
        },
        OptimizeMethod::Hrp => {
            let assets = ctx.assets()?;
            let panel = match &names {
                Some(n) => assets.select(n)?,
                None => assets,
            };
            let window = trailing(&panel, alloc.cov_window)?;
            let b = alloc.bounds.map(|_| ctx.bounds(window.n_cols()));
            let r = hrp_weights(&window, b.as_ref(), ctx.cfg.geometry.linkage)?;
            (r.weights, json!({ "linkage": linkage_json(&r.distance, &r.tree) }))
        }
        OptimizeMethod::Minvar => {
            let cov = ctx.covariance(&ctx.assets()?, names.as_deref())?;
            let (w, sol) = min_variance_weights(&cov, &ctx.bounds(cov.len()))?;
            let diag = json!({
                "variance": sol.objective,
                "kkt_residual": sol.kkt_residual,
                "iterations": sol.iterations,
                "converged": sol.converged,
            });
            (w, diag)
        }
        OptimizeMethod::Maxsharpe => {
            let assets = ctx.assets()?;
            let cov = ctx.covariance(&assets, names.as_deref())?;
            let window = trailing(&assets.select(&cov.names)?, alloc.cov_window)?;
            let mu: Vec<f64> = window.values().column_iter().map(|c| c.mean()).collect();
            let (w, sharpe) = max_sharpe_weights(&cov, &mu, alloc.risk_free, &ctx.bounds(cov.len()))?;
            (w, json!({ "sharpe_per_period": sharpe, "risk_free": alloc.risk_free }))
        }
        OptimizeMethod::Cvar => {
            let assets = ctx.assets()?;
            let (names, scenarios, source) = match &inputs.sensitivities {
                Some(p) => {
                    existing(p, "sensitivities")?;
                    let f = File::open(p).map_err(|e| CliError::io(p, e))?;
                    let s = SensitivityMatrix::read_csv(f, &p.display().to_string())?;
                    let cands = trailing(&ctx.candidates()?.select(&s.drivers)?, alloc.cov_window)?;
                    (s.assets.clone(), sensitivity_scenarios(&s, cands.values())?, "sensitivity")
                }
                None => {
                    let panel = match &names {
                        Some(n) => assets.select(n)?,
                        None => assets,
                    };
                    let w = trailing(&panel, alloc.cov_window)?;
                    (w.names().to_vec(), w.values().clone(), "historical")
                }
            };
            let n_scen = scenarios.nrows();
            let bounds = ctx.bounds(names.len());
            let sol = cvar_optimize(&CvarProblem::new(names, scenarios, alloc.alpha, bounds)?)?;
            let diag = json!({
                "alpha": alloc.alpha,
                "cvar": sol.cvar,
                "var": sol.zeta,
                "scenarios": source,
                "n_scenarios": n_scen,
                "iterations": sol.iterations,
            });
            (sol.weights, diag)
        }
    };
    ctx.out.write_csv_rows("weights.csv", &["asset", "weight"], &weights_rows(&weights))?;
    ctx.out.write_json(
        "optimize.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "method": method,
            "bounds": alloc.bounds,
            "weights": weights.names.iter().zip(&weights.weights).map(|(n, w)| json!({"asset": n, "weight": w})).collect::<Vec<_>>(),
            "sum": weights.sum(),
            "valid": weights.is_valid(),
            "diagnostics": diagnostics,
        }),
    )?;
    Ok(())
}

pub fn simulate(ctx: &mut Context, src: &DriverSource) -> Result<(), CliError> {
    let (assets, candidates) = ctx.panels()?;
    let drivers = ctx.drivers(src, &assets, &candidates)?;
    let pcfg = ctx.cfg.path_config(ctx.fit_window(&assets));
    let r = path_dependent_hsp(&assets, &candidates, &pcfg, Some(&drivers))?;
    let m = drivers.len();
    let calibrations: Vec<_> = r
        .calibrations
        .iter()
        .enumerate()
        .map(|(p, c)| json!({ "asset": r.current.assets[p / m], "driver": drivers[p % m], "calibration": c }))
        .collect();
    ctx.out.write_json(
        "sde_params.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "model": pcfg.model,
            "seed": pcfg.seed,
            "dt": pcfg.dt,
            "horizon": pcfg.horizon,
            "n_paths": pcfg.n_paths,
            "noise": pcfg.noise,
            "assets": r.current.assets,
            "drivers": drivers,
            "calibrations": calibrations,
            "leaf_names": r.tree.leaf_order.iter().map(|&i| r.distance.names[i].clone()).collect::<Vec<_>>(),
        }),
    )?;
    ctx.out.write_with("sensitivities_current.csv", |b| r.current.write_csv(b))?;
    ctx.out.write_with("path_distance.csv", |b| r.distance.write_csv(b))?;
    ctx.out.write_csv_rows("path_weights.csv", &["asset", "weight"], &weights_rows(&r.weights))?;
    if ctx.cfg.sde.write_stack {
        let params = r.calibrations.iter().map(|c| c.params.clone()).collect();
        let ens = simulate_ensemble(
            r.current.assets.clone(),
            drivers.clone(),
            params,
            &r.current.values,
            pcfg.horizon,
            pcfg.n_paths,
            pcfg.seed,
            pcfg.noise,
        )?;
        for (t, d) in trajectory_distance_matrices(&ens)?.iter().enumerate() {
            ctx.out.write_with(&format!("distance_stack/step_{:04}.csv", t + 1), |b| d.write_csv(b))?;
        }
    }
    Ok(())
}

pub fn backtest(ctx: &mut Context) -> Result<(), CliError> {
    let methods = ctx.cfg.backtest.methods.clone();
    if methods.is_empty() {
        return Err(CliError::config("<config>", "backtest.methods is empty"));
    }
    let needs_candidates = methods.iter().any(|m| matches!(m, Method::Hsp | Method::PathHsp | Method::QpDistance));
    let (assets, candidates) = if needs_candidates {
        let (a, c) = ctx.panels()?;
        (a, Some(c))
    } else {
        (ctx.assets()?, None)
    };
    let bcfg = ctx.cfg.backtest_config();
    let results = run_methods(&assets, candidates.as_ref(), &bcfg, &methods)?;
    let mut summary = Vec::new();
    for r in &results {
        ctx.out.write_with(&format!("nav_{}.csv", r.label), |b| r.write_nav_csv(b))?;
        ctx.out.write_with(&format!("weights_{}.csv", r.label), |b| r.write_weights_csv(b))?;
        let drivers: Vec<_> = r
            .rebalances
            .iter()
            .filter(|x| !x.drivers.is_empty())
            .map(|x| json!({ "date": x.date, "drivers": x.drivers }))
            .collect();
        summary.push(json!({
            "label": r.label,
            "metrics": r.metrics,
            "n_rebalances": r.rebalances.len(),
            "first_date": r.dates.first(),
            "last_date": r.dates.last(),
            "final_nav": r.nav.last(),
            "drivers": drivers,
        }));
    }
    ctx.out.write_json(
        "metrics.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "seed": ctx.cfg.seed,
            "bounds": bcfg.bounds,
            "rebalance_stride": bcfg.rebalance_stride,
            "methods": summary,
        }),
    )?;
    Ok(())
}

pub fn synth(ctx: &mut Context) -> Result<(), CliError> {
    let spec = ctx.cfg.synth_spec();
    let m = two_cluster_market(&spec)?;
    ctx.out.write_with("assets.csv", |b| m.assets.write_csv(b))?;
    ctx.out.write_with("candidates.csv", |b| m.candidates.write_csv(b))?;
    ctx.out.write_json(
        "synth.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "spec": spec,
            "planted": m.planted,
            "cluster": m.assets.names().iter().zip(&m.cluster).map(|(n, c)| json!({"asset": n, "cluster": c})).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

/// Parse a value of a serde enum (snake or kebab case as declared) from a flag.
pub fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

pub fn parse_bounds(s: &str) -> Result<Option<(f64, f64)>, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let (l, u) = s.split_once(':').ok_or_else(|| format!("expected LOWER:UPPER or `none`, got `{s}`"))?;
    let l: f64 = l.trim().parse().map_err(|e| format!("lower bound: {e}"))?;
    let u: f64 = u.trim().parse().map_err(|e| format!("upper bound: {e}"))?;
    Ok(Some((l, u)))
}

pub fn parse_metric(s: &str) -> Result<Option<f64>, String> {
    match s {
        "euclid" | "euclidean" => Ok(None),
        _ => {
            let sigma = s.strip_prefix("kernel:").ok_or_else(|| format!("expected `euclid` or `kernel:SIGMA`, got `{s}`"))?;
            sigma.parse::<f64>().map(Some).map_err(|e| format!("kernel sigma: {e}"))
        }
    }
}

pub fn parse_model(s: &str) -> Result<SdeModel, String> {
    parse_enum(&s.replace('-', "_"))
}

pub fn parse_kind(s: &str) -> Result<ModelKind, String> {
    parse_enum(s)
}
