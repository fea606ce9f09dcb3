//! Command implementations behind the `walksearch` binary.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use walksearch::ensemble::{
    run_ensemble, run_trajectory, sweep_xi, threshold_time, EnsembleStats, PropertyReport, SimulationConfig,
};
use walksearch::graph::{walk_hamiltonian, CycleGraph, WalkParameters};
use walksearch::lindblad::{index_jump_operator, populations_series};
use walksearch::monitoring::{Channel, MonitoringSetup};
use walksearch::optimize::FeedbackStrategy;

pub use config::{parse_config, parse_config_str};
pub use output::OutputBundle;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config file not found: {0}")]
    MissingFile(String),
    #[error("malformed config: {0}")]
    Schema(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("run failed: {0}")]
    Runtime(#[from] walksearch::Error),
    #[error("run finished with violated invariants: {0}")]
    Violation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 malformed config, 3 failed run or i/o, 4 missing config file,
    /// 5 config values out of range.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Schema(_) => 2,
            Self::Runtime(_) | Self::Violation(_) | Self::Io(_) => 3,
            Self::MissingFile(_) => 4,
            Self::Invalid(_) => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    /// Position quadratures `x̂` and `ŷ`.
    Xy,
    /// The single node-index operator.
    Index,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    version: &'a str,
    t_th: Option<f64>,
    t_th_stderr: Option<f64>,
    effective_time: Option<f64>,
    effective_time_stderr: Option<f64>,
    asymptotic_theta: &'a [f64],
    asymptotic_theta_stderr: &'a [f64],
    n_completed: usize,
    n_aborted: usize,
    optimizer_warnings: u64,
    properties: &'a PropertyReport,
    config: &'a SimulationConfig,
}

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn summary<'a>(command: &'a str, st: &'a EnsembleStats, cfg: &'a SimulationConfig) -> Summary<'a> {
    Summary {
        command,
        version: VERSION,
        t_th: st.t_th,
        t_th_stderr: st.t_th_se,
        effective_time: st.effective_time,
        effective_time_stderr: st.effective_time_se,
        asymptotic_theta: &st.asymptotic_theta,
        asymptotic_theta_stderr: &st.asymptotic_theta_se,
        n_completed: st.n_completed,
        n_aborted: st.n_aborted,
        optimizer_warnings: st.optimizer_warnings,
        properties: &st.properties,
        config: cfg,
    }
}

fn prepare(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Ensemble run: `ensemble.csv`, `couplings.csv`, `summary.json` and, for the
/// analytic strategy, `curvature.csv`.
pub fn cmd_simulate(cfg: &SimulationConfig, out: &Path) -> Result<OutputBundle, CliError> {
    prepare(out)?;
    let st = run_ensemble(cfg)?;
    let bundle = OutputBundle::in_dir(out);
    output::write_ensemble_csv(&bundle.ensemble_csv, &st, cfg.record_stride)?;
    output::write_couplings_csv(&bundle.couplings_csv, &st, cfg.record_stride)?;
    if cfg.strategy == FeedbackStrategy::AnalyticSingle {
        output::write_curvature_csv(&out.join("curvature.csv"), &st, cfg.record_stride)?;
    }
    output::write_json(&bundle.summary_json, &summary("simulate", &st, cfg))?;
    if !st.properties.is_clean() {
        return Err(CliError::Violation(format!("{:?}", st.properties)));
    }
    Ok(bundle)
}

#[derive(Serialize)]
struct TrajectorySummary<'a> {
    command: &'a str,
    version: &'a str,
    index: u64,
    t_th: Option<f64>,
    config: &'a SimulationConfig,
}

/// Single trajectory: `trajectory.csv` and `summary.json`.
pub fn cmd_trajectory(cfg: &SimulationConfig, index: u64, out: &Path) -> Result<PathBuf, CliError> {
    prepare(out)?;
    let rec = run_trajectory(cfg, index)?;
    let path = out.join("trajectory.csv");
    output::write_trajectory_csv(&path, &rec)?;
    let s = TrajectorySummary {
        command: "trajectory",
        version: VERSION,
        index,
        t_th: threshold_time(&rec.times, &rec.fidelity, cfg.f_th),
        config: cfg,
    };
    output::write_json(&out.join("summary.json"), &s)?;
    Ok(path)
}

#[derive(Serialize)]
struct UnconditionalSummary<'a> {
    command: &'a str,
    version: &'a str,
    channels: Channels,
    max_population_deviation: f64,
    max_population_spread: f64,
    config: &'a SimulationConfig,
}

/// Master-equation populations: `populations.csv` and `summary.json`.
pub fn cmd_unconditional(cfg: &SimulationConfig, channels: Channels, out: &Path) -> Result<PathBuf, CliError> {
    prepare(out)?;
    let g = CycleGraph::new(cfg.n)?;
    let h = walk_hamiltonian(&g, &WalkParameters::new(cfg.gamma)?);
    let m = match channels {
        Channels::Xy => MonitoringSetup::position(&g, cfg.kappa, cfg.eta)?,
        Channels::Index => MonitoringSetup::new(cfg.n, vec![Channel::new(index_jump_operator(&g), cfg.kappa, cfg.eta)?])?,
    };
    let series = populations_series(&g, &h, &m, cfg.dt, cfg.steps)?;
    let path = out.join("populations.csv");
    output::write_populations_csv(&path, &series, cfg.record_stride)?;
    let uniform = 1.0 / cfg.n as f64;
    let (mut dev, mut spread) = (0.0_f64, 0.0_f64);
    for s in &series {
        let max = s.populations.iter().cloned().fold(f64::MIN, f64::max);
        let min = s.populations.iter().cloned().fold(f64::MAX, f64::min);
        dev = dev.max((max - uniform).abs()).max((min - uniform).abs());
        spread = spread.max(max - min);
    }
    let s = UnconditionalSummary {
        command: "unconditional",
        version: VERSION,
        channels,
        max_population_deviation: dev,
        max_population_spread: spread,
        config: cfg,
    };
    output::write_json(&out.join("summary.json"), &s)?;
    Ok(path)
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    command: &'a str,
    version: &'a str,
    rows: &'a [walksearch::ensemble::SweepRow],
    config: &'a SimulationConfig,
}

/// Bounded-strategy sweep: `sweep.csv` and `summary.json`.
pub fn cmd_sweep_xi(cfg: &SimulationConfig, xi: &[f64], out: &Path) -> Result<PathBuf, CliError> {
    prepare(out)?;
    let rows = sweep_xi(cfg, xi)?;
    let path = out.join("sweep.csv");
    output::write_sweep_csv(&path, &rows)?;
    let s = SweepSummary {
        command: "sweep-xi",
        version: VERSION,
        rows: &rows,
        config: cfg,
    };
    output::write_json(&out.join("summary.json"), &s)?;
    Ok(path)
}

/// Parses `1,5,50`.
pub fn parse_xi_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Schema(format!("not a number in --xi: {t:?}")))
        })
        .collect()
}
