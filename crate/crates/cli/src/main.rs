//! `hsp`: causal-driver portfolio pipeline.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hsp_core::backtest::Method;
use hsp_core::driver_selection::SelectionMode;
use hsp_core::market_data::InputKind;
use hsp_core::sde_paths::SdeModel;
use hsp_core::sensitivity_models::ModelKind;

use commands::{parse_bounds, parse_enum, parse_kind, parse_metric, parse_model, Context, DriverSource, OptimizeInputs};
use config::{OptimizeMethod, RunConfig};
use error::CliError;
use output::OutputDir;

/// Log level comes from the `HSP_LOG` environment variable (error, warn, info, debug).
#[derive(Debug, Parser)]
#[command(name = "hsp", version, about = "Causal-driver portfolio construction pipeline")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-level seed; every module derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Asset CSV (`date,<series...>`).
    #[arg(long, global = true)]
    assets: Option<PathBuf>,
    /// Candidate driver CSV (`date,<series...>`).
    #[arg(long, global = true)]
    candidates: Option<PathBuf>,
    /// Whether the input CSVs hold `prices` or `returns`.
    #[arg(long, global = true, value_parser = parse_enum::<InputKind>)]
    kind: Option<InputKind>,
    /// Trailing rows used for selection and fitting.
    #[arg(long, global = true)]
    fit_window: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct DriverArgs {
    /// Comma-separated driver names.
    #[arg(long, value_delimiter = ',', conflicts_with = "selection")]
    drivers: Option<Vec<String>>,
    /// `selection.json` written by `select-drivers`.
    #[arg(long)]
    selection: Option<PathBuf>,
}

impl From<DriverArgs> for DriverSource {
    fn from(a: DriverArgs) -> Self {
        DriverSource { drivers: a.drivers, selection: a.selection }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank candidate drivers and select the common set.
    SelectDrivers {
        #[arg(long, value_parser = parse_enum::<SelectionMode>)]
        mode: Option<SelectionMode>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        exclude: Option<Vec<String>>,
    },
    /// Fit per-asset models and write the sensitivity matrix.
    FitSensitivities {
        #[command(flatten)]
        drivers: DriverArgs,
        #[arg(long, value_parser = parse_kind)]
        model: Option<ModelKind>,
        #[arg(long)]
        lag: Option<usize>,
    },
    /// Distance matrix and single-linkage tree from a sensitivity CSV.
    DistanceMatrix {
        #[arg(long)]
        sensitivities: PathBuf,
        #[arg(long)]
        psd_repair: bool,
        /// `euclid` or `kernel:SIGMA`.
        #[arg(long, value_parser = parse_metric)]
        metric: Option<Option<f64>>,
    },
    /// Portfolio weights by one allocator.
    Optimize {
        #[arg(long, value_enum)]
        method: Option<OptimizeMethod>,
        /// `LOWER:UPPER` or `none`.
        #[arg(long, value_parser = parse_bounds)]
        bounds: Option<Option<(f64, f64)>>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Distance CSV from `distance-matrix` or `simulate-paths`.
        #[arg(long)]
        distance: Option<PathBuf>,
        /// Sensitivity CSV; with `--method cvar`, scenarios become sensitivity-mapped driver returns.
        #[arg(long)]
        sensitivities: Option<PathBuf>,
        #[arg(long)]
        psd_repair: bool,
        #[command(flatten)]
        drivers: DriverArgs,
    },
    /// Calibrate sensitivity SDEs, simulate them and write the cumulative trajectory distance.
    SimulatePaths {
        #[command(flatten)]
        drivers: DriverArgs,
        #[arg(long, value_parser = parse_model)]
        model: Option<SdeModel>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        paths: Option<usize>,
        /// Also write the per-step distance matrices.
        #[arg(long)]
        stack: bool,
    },
    /// Walk-forward backtest of the configured methods.
    Backtest {
        /// Comma-separated method labels.
        #[arg(long, value_delimiter = ',', value_parser = parse_enum::<Method>)]
        methods: Option<Vec<Method>>,
    },
    /// Seeded two-cluster synthetic market.
    Synth {
        #[arg(long)]
        n_assets: Option<usize>,
        #[arg(long)]
        n_candidates: Option<usize>,
        #[arg(long)]
        rows: Option<usize>,
    },
}

fn apply_flags(cli: &Cli, cfg: &mut RunConfig) {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.out {
        cfg.output_dir = Some(p.clone());
    }
    if let Some(p) = &cli.assets {
        cfg.data.assets = Some(p.clone());
    }
    if let Some(p) = &cli.candidates {
        cfg.data.candidates = Some(p.clone());
    }
    if let Some(k) = cli.kind {
        cfg.data.kind = k;
    }
    if let Some(w) = cli.fit_window {
        cfg.data.fit_window = Some(w);
    }
    match &cli.command {
        Command::SelectDrivers { mode, m, epsilon, exclude } => {
            if let Some(x) = mode {
                cfg.selection.mode = *x;
            }
            if let Some(x) = m {
                cfg.selection.m = *x;
            }
            if let Some(x) = epsilon {
                cfg.selection.epsilon = *x;
            }
            if let Some(x) = exclude {
                cfg.selection.exclude = x.clone();
            }
        }
        Command::FitSensitivities { model, lag, .. } => {
            if let Some(x) = model {
                cfg.sensitivity.model = *x;
            }
            if let Some(x) = lag {
                cfg.sensitivity.lag = *x;
            }
        }
        Command::DistanceMatrix { psd_repair, metric, .. } => {
            cfg.geometry.psd_repair |= psd_repair;
            if let Some(x) = metric {
                cfg.geometry.kernel_sigma = *x;
            }
        }
        Command::Optimize { method, bounds, alpha, lambda, psd_repair, .. } => {
            if let Some(x) = method {
                cfg.allocation.method = *x;
            }
            if let Some(x) = bounds {
                cfg.allocation.bounds = *x;
            }
            if let Some(x) = alpha {
                cfg.allocation.alpha = *x;
            }
            if let Some(x) = lambda {
                cfg.allocation.lambda = *x;
            }
            cfg.geometry.psd_repair |= psd_repair;
        }
        Command::SimulatePaths { model, horizon, paths, stack, .. } => {
            if let Some(x) = model {
                cfg.sde.model = *x;
            }
            if let Some(x) = horizon {
                cfg.sde.horizon = *x;
            }
            if let Some(x) = paths {
                cfg.sde.n_paths = *x;
            }
            cfg.sde.write_stack |= stack;
        }
        Command::Backtest { methods } => {
            if let Some(x) = methods {
                cfg.backtest.methods = x.clone();
            }
        }
        Command::Synth { n_assets, n_candidates, rows } => {
            if let Some(x) = n_assets {
                cfg.synth.n_assets = *x;
            }
            if let Some(x) = n_candidates {
                cfg.synth.n_candidates = *x;
            }
            if let Some(x) = rows {
                cfg.synth.n_rows = *x;
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_flags(&cli, &mut cfg);
    let out = OutputDir::create(cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out")))?;
    let mut ctx = Context { cfg, out };
    match cli.command {
        Command::SelectDrivers { .. } => commands::select(&mut ctx)?,
        Command::FitSensitivities { drivers, .. } => commands::fit(&mut ctx, &drivers.into())?,
        Command::DistanceMatrix { sensitivities, .. } => commands::distance(&mut ctx, &sensitivities)?,
        Command::Optimize { distance, sensitivities, drivers, .. } => {
            commands::optimize(&mut ctx, &OptimizeInputs { distance, sensitivities, drivers: drivers.into() })?
        }
        Command::SimulatePaths { drivers, .. } => commands::simulate(&mut ctx, &drivers.into())?,
        Command::Backtest { .. } => commands::backtest(&mut ctx)?,
        Command::Synth { .. } => commands::synth(&mut ctx)?,
    }
    for p in ctx.out.written() {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HSP_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
