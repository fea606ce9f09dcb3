//! Experiment files.
//!
//! One flat TOML table per experiment. Only `n` and `strategy` are required;
//! everything else falls back to [`SimulationConfig::new`]. Unknown keys are
//! rejected.

use std::path::Path;

use serde::Deserialize;
use walksearch::ensemble::SimulationConfig;
use walksearch::feedback::ControlKind;
use walksearch::optimize::{FeedbackStrategy, GradientMethod};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StrategyName {
    None,
    Unbounded,
    Bounded,
    Digital,
    AnalyticSingle,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    n: usize,
    strategy: StrategyName,
    xi: Option<f64>,
    values: Option<Vec<f64>>,
    gamma: Option<f64>,
    kappa: Option<f64>,
    eta: Option<f64>,
    dt: Option<f64>,
    steps: Option<usize>,
    n_traj: Option<usize>,
    control_kind: Option<ControlKind>,
    target: Option<usize>,
    f_th: Option<f64>,
    master_seed: Option<u64>,
    record_stride: Option<usize>,
    record_dy: Option<bool>,
    fd_step: Option<f64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    warm_start: Option<bool>,
    gradient: Option<GradientMethod>,
}

fn strategy(raw: &RawConfig) -> Result<FeedbackStrategy, CliError> {
    let schema = |m: &str| Err(CliError::Schema(m.to_string()));
    if raw.xi.is_some() && raw.strategy != StrategyName::Bounded {
        return schema("`xi` is only valid with strategy = \"bounded\"");
    }
    if raw.values.is_some() && raw.strategy != StrategyName::Digital {
        return schema("`values` is only valid with strategy = \"digital\"");
    }
    Ok(match raw.strategy {
        StrategyName::None => FeedbackStrategy::None,
        StrategyName::Unbounded => FeedbackStrategy::Unbounded,
        StrategyName::AnalyticSingle => FeedbackStrategy::AnalyticSingle,
        StrategyName::Bounded => match raw.xi {
            Some(xi) => FeedbackStrategy::Bounded { xi },
            None => return schema("strategy = \"bounded\" needs `xi`"),
        },
        StrategyName::Digital => match &raw.values {
            Some(v) => FeedbackStrategy::Digital { values: v.clone() },
            None => return schema("strategy = \"digital\" needs `values`"),
        },
    })
}

/// Parses and validates an experiment from TOML text.
pub fn parse_config_str(text: &str) -> Result<SimulationConfig, CliError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Schema(e.message().to_string()))?;
    let mut cfg = SimulationConfig::new(raw.n, strategy(&raw)?);
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = raw.$field { cfg.$field = v; } )* };
    }
    set!(gamma, kappa, eta, dt, n_traj, control_kind, target, f_th, master_seed, record_stride, record_dy);
    cfg.steps = raw
        .steps
        .unwrap_or_else(|| SimulationConfig::default_steps(&cfg.strategy, cfg.dt));
    if let Some(v) = raw.fd_step {
        cfg.optimizer.fd_step = v;
    }
    if let Some(v) = raw.tol {
        cfg.optimizer.tol = v;
    }
    if let Some(v) = raw.max_iter {
        cfg.optimizer.max_iter = v;
    }
    if let Some(v) = raw.warm_start {
        cfg.optimizer.warm_start = v;
    }
    if let Some(v) = raw.gradient {
        cfg.optimizer.gradient = v;
    }
    cfg.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<SimulationConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.display().to_string())
        } else {
            CliError::Io(e)
        }
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = parse_config_str("n = 5\nstrategy = \"unbounded\"\n").unwrap();
        assert_eq!(cfg.dt, 0.01);
        assert_eq!(cfg.n_traj, 5000);
        assert_eq!(cfg.f_th, 0.95);
        assert_eq!(cfg.kappa, 1.0);
        assert_eq!(cfg.eta, 1.0);
        assert_eq!(cfg.steps, 300);
        assert_eq!(cfg.control_kind, ControlKind::Hopping);
    }

    #[test]
    fn horizon_follows_dt() {
        let cfg = parse_config_str("n = 5\nstrategy = \"bounded\"\nxi = 1.0\ndt = 0.02\n").unwrap();
        assert_eq!(cfg.steps, 600);
    }

    #[test]
    fn strategy_parameters() {
        let cfg = parse_config_str("n = 5\nstrategy = \"digital\"\nvalues = [0.0, 1.0, -1.0]\n").unwrap();
        assert_eq!(
            cfg.strategy,
            FeedbackStrategy::Digital {
                values: vec![0.0, 1.0, -1.0]
            }
        );
        assert!(matches!(
            parse_config_str("n = 5\nstrategy = \"bounded\"\n"),
            Err(CliError::Schema(_))
        ));
        assert!(matches!(
            parse_config_str("n = 5\nstrategy = \"unbounded\"\nxi = 2.0\n"),
            Err(CliError::Schema(_))
        ));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(
            parse_config_str("n = 5\nstrategy = \"bounded\"\nxi = 0.5\n"),
            Err(CliError::Invalid(_))
        ));
        assert!(matches!(
            parse_config_str("n = 5\nstrategy = \"none\"\ndt = -0.01\n"),
            Err(CliError::Invalid(_))
        ));
        assert!(matches!(
            parse_config_str("n = 5\nstrategy = \"none\"\ncolour = 3\n"),
            Err(CliError::Schema(_))
        ));
        assert!(matches!(parse_config_str("strategy = \"none\"\n"), Err(CliError::Schema(_))));
        assert!(matches!(
            parse_config_str("n = 5\nstrategy = \"greedy\"\n"),
            Err(CliError::Schema(_))
        ));
    }

    #[test]
    fn optimizer_keys() {
        let cfg = parse_config_str(
            "n = 5\nstrategy = \"unbounded\"\ngradient = \"central_difference\"\nmax_iter = 50\nwarm_start = false\n",
        )
        .unwrap();
        assert_eq!(cfg.optimizer.gradient, GradientMethod::CentralDifference);
        assert_eq!(cfg.optimizer.max_iter, 50);
        assert!(!cfg.optimizer.warm_start);
    }
}
