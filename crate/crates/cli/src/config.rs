//! Run configuration: one TOML file with sections, overridden by flags.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use hsp_core::allocation::hierarchical::LinkageInput;
use hsp_core::allocation::qp::InverseMode;
use hsp_core::allocation::HspConfig;
use hsp_core::backtest::{BacktestConfig, Holding, Method};
use hsp_core::driver_selection::SelectionConfig;
use hsp_core::market_data::{AlignPolicy, InputKind};
use hsp_core::rng::derive_seed;
use hsp_core::sde_paths::{NoiseMode, PathHspConfig, SdeModel};
use hsp_core::sensitivity_models::SensitivityConfig;
use hsp_core::synth::TwoClusterSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub selection: SelectionConfig,
    pub sensitivity: SensitivityConfig,
    pub geometry: GeometrySection,
    pub allocation: AllocationSection,
    pub sde: SdeSection,
    pub backtest: BacktestSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            output_dir: None,
            data: DataSection::default(),
            selection: SelectionConfig::default(),
            sensitivity: SensitivityConfig::default(),
            geometry: GeometrySection::default(),
            allocation: AllocationSection::default(),
            sde: SdeSection::default(),
            backtest: BacktestSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub assets: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub kind: InputKind,
    pub align: AlignPolicy,
    /// Trailing rows used by `select-drivers`, `fit-sensitivities` and the HSP pipeline; all rows when absent.
    pub fit_window: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { assets: None, candidates: None, kind: InputKind::Returns, align: AlignPolicy::Inner, fit_window: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub psd_repair: bool,
    pub psd_tol: f64,
    pub linkage: LinkageInput,
    /// Gaussian kernel width; plain Euclidean distances when absent.
    pub kernel_sigma: Option<f64>,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self { psd_repair: false, psd_tol: 1e-10, linkage: LinkageInput::ColumnEuclidean, kernel_sigma: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizeMethod {
    Hsp,
    Hrp,
    ClosedForm,
    Qp,
    Minvar,
    Maxsharpe,
    Cvar,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationSection {
    pub method: OptimizeMethod,
    /// Uniform `[lower, upper]`; long-only `[0, 1]` when absent.
    pub bounds: Option<(f64, f64)>,
    pub lambda: f64,
    pub alpha: f64,
    pub inverse: InverseMode,
    pub cov_window: usize,
    pub risk_free: f64,
}

impl Default for AllocationSection {
    fn default() -> Self {
        Self {
            method: OptimizeMethod::Hsp,
            bounds: None,
            lambda: 1.0,
            alpha: 0.95,
            inverse: InverseMode::Inverse,
            cov_window: 63,
            risk_free: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSection {
    pub model: SdeModel,
    pub dt: f64,
    pub series_window: usize,
    pub series_length: usize,
    pub stride: usize,
    pub hw_span: usize,
    pub horizon: usize,
    pub n_paths: usize,
    pub noise: NoiseMode,
    /// Write the per-step distance matrices next to the cumulative one.
    pub write_stack: bool,
}

impl Default for SdeSection {
    fn default() -> Self {
        let p = PathHspConfig::default();
        Self {
            model: p.model,
            dt: p.dt,
            series_window: p.series_window,
            series_length: p.series_length,
            stride: p.stride,
            hw_span: p.hw_span,
            horizon: p.horizon,
            n_paths: p.n_paths,
            noise: p.noise,
            write_stack: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub methods: Vec<Method>,
    pub rebalance_stride: usize,
    pub driver_stride: usize,
    /// Trailing rows for driver selection and model fitting at each decision.
    pub fit_window: usize,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    pub initial_nav: f64,
    pub holding: Holding,
    pub cost_bps: f64,
    pub warmup: Option<usize>,
    pub risk_aversion: f64,
    pub target_return: Option<f64>,
}

impl Default for BacktestSection {
    fn default() -> Self {
        let b = BacktestConfig::default();
        let mut methods = vec![Method::Hsp];
        methods.extend(Method::BENCHMARKS);
        Self {
            methods,
            rebalance_stride: b.rebalance_stride,
            driver_stride: b.driver_stride,
            fit_window: b.hsp.fit_window,
            start: b.start,
            end: b.end,
            initial_nav: b.initial_nav,
            holding: b.holding,
            cost_bps: b.cost_bps,
            warmup: b.warmup,
            risk_aversion: b.risk_aversion,
            target_return: b.target_return,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_assets: usize,
    pub n_candidates: usize,
    pub n_rows: usize,
    pub start: NaiveDate,
    pub driver_vol: f64,
    pub noise_vol: f64,
    pub drift: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = TwoClusterSpec::default();
        Self {
            n_assets: s.n_assets,
            n_candidates: s.n_candidates,
            n_rows: s.n_rows,
            start: s.start,
            driver_vol: s.driver_vol,
            noise_vol: s.noise_vol,
            drift: s.drift,
        }
    }
}

impl RunConfig {
    /// Parse `path`; relative data paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(path, e.to_string()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::config(path, e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                path,
                format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", cfg.schema_version),
            ));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.assets, &mut cfg.data.candidates, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn module_seed(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }

    /// Sensitivity settings with the network seed drawn from the top-level seed.
    pub fn sensitivity_config(&self) -> SensitivityConfig {
        let mut s = self.sensitivity.clone();
        let seed = self.module_seed("sensitivity");
        s.network.seed = seed;
        for g in &mut s.grid {
            g.seed = seed;
        }
        s
    }

    pub fn hsp_config(&self, fit_window: usize) -> HspConfig {
        HspConfig {
            selection: self.selection.clone(),
            sensitivity: self.sensitivity_config(),
            fit_window,
            cov_window: self.allocation.cov_window,
            psd_repair: self.geometry.psd_repair,
            psd_tol: self.geometry.psd_tol,
            linkage: self.geometry.linkage,
            bounds: self.allocation.bounds,
        }
    }

    pub fn path_config(&self, fit_window: usize) -> PathHspConfig {
        let s = &self.sde;
        PathHspConfig {
            hsp: self.hsp_config(fit_window),
            model: s.model,
            dt: s.dt,
            series_window: s.series_window,
            series_length: s.series_length,
            stride: s.stride,
            hw_span: s.hw_span,
            horizon: s.horizon,
            n_paths: s.n_paths,
            seed: self.module_seed("sde"),
            noise: s.noise,
        }
    }

    pub fn backtest_config(&self) -> BacktestConfig {
        let b = &self.backtest;
        BacktestConfig {
            rebalance_stride: b.rebalance_stride,
            driver_stride: b.driver_stride,
            bounds: self.allocation.bounds,
            start: b.start,
            end: b.end,
            initial_nav: b.initial_nav,
            holding: b.holding,
            cost_bps: b.cost_bps,
            cov_window: self.allocation.cov_window,
            warmup: b.warmup,
            hsp: self.hsp_config(b.fit_window),
            path: self.path_config(b.fit_window),
            risk_aversion: b.risk_aversion,
            target_return: b.target_return,
            qp_lambda: self.allocation.lambda,
            cvar_alpha: self.allocation.alpha,
            seed: self.module_seed("backtest"),
        }
    }

    pub fn synth_spec(&self) -> TwoClusterSpec {
        let s = &self.synth;
        TwoClusterSpec {
            seed: self.module_seed("synth"),
            n_assets: s.n_assets,
            n_candidates: s.n_candidates,
            n_rows: s.n_rows,
            start: s.start,
            driver_vol: s.driver_vol,
            noise_vol: s.noise_vol,
            drift: s.drift,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.allocation.cov_window, 63);
        assert_eq!(cfg.backtest.methods.len(), 7);
    }

    #[test]
    fn sections_parse() {
        let text = r#"
            seed = 11
            [data]
            kind = "prices"
            fit_window = 84
            [selection]
            m = 3
            mode = "greedy_gs"
            [geometry]
            kernel_sigma = 0.5
            [allocation]
            method = "closed-form"
            bounds = [0.03, 0.10]
            inverse = "pseudo"
            [sde]
            model = "hull_white"
            [backtest]
            methods = ["hsp", "min-vol"]
            holding = "constant_weights"
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.selection.m, 3);
        assert_eq!(cfg.allocation.bounds, Some((0.03, 0.10)));
        assert_eq!(cfg.allocation.method, OptimizeMethod::ClosedForm);
        assert_eq!(cfg.backtest.methods, vec![Method::Hsp, Method::MinVol]);
        assert_eq!(cfg.sde.model, SdeModel::HullWhite);
        let bt = cfg.backtest_config();
        assert_eq!(bt.hsp.fit_window, 84);
        assert_eq!(bt.bounds, Some((0.03, 0.10)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[allocation]\nlamda = 2.0").is_err());
        assert!(toml::from_str::<RunConfig>("[selection]\nmm = 2").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
    }

    #[test]
    fn module_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.module_seed("sde"), cfg.module_seed("synth"));
        let s = cfg.sensitivity_config();
        assert_eq!(s.network.seed, cfg.module_seed("sensitivity"));
    }
}
