//! Run configuration: a TOML file with one table per module, then flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sps_feedback::generator::{FeedbackOptions, ModelParams};
use sps_feedback::optimize::{log_grid, step_grid, Mode, OptimizationConfig};
use sps_feedback::propagate::{Method, Rk4Options};
use sps_feedback::rates::RatePathway;
use sps_feedback::reference::FIG4_OMEGAS;

use crate::{Cli, CliError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationSection {
    pub epsilon: Option<f64>,
    pub ts_start: f64,
    pub ts_stop: f64,
    pub ts_step: f64,
    pub nu1_min: f64,
    pub nu1_max: f64,
    pub nu1_count: usize,
    pub gamma_set: Vec<f64>,
    pub time_tol: f64,
    pub include_untriggered: bool,
    pub include_open_loop: bool,
    pub method: Method,
}

impl Default for OptimizationSection {
    fn default() -> Self {
        Self {
            epsilon: None,
            ts_start: 0.0,
            ts_stop: 100.0,
            ts_step: 0.5,
            nu1_min: 0.1,
            nu1_max: 10.0,
            nu1_count: 24,
            gamma_set: vec![0.1, 1.0, 10.0],
            time_tol: 1e-4,
            include_untriggered: true,
            include_open_loop: false,
            method: Method::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Time at which pumping is forced off.
    pub t_switch: f64,
    pub t_end: f64,
    pub sample_step: f64,
    pub method: Method,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { t_switch: 20.0, t_end: 200.0, sample_step: 0.5, method: Method::Auto }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub omegas: Vec<f64>,
    /// Empty means the model's own g.
    pub gs: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { omegas: FIG4_OMEGAS.to_vec(), gs: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub keep_measurement_after_stop: bool,
    pub use_approx_rates: bool,
    pub validate_cross_method: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<PathBuf>,
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelParams,
    pub optimization: OptimizationSection,
    pub simulate: SimulateSection,
    pub sweep: SweepSection,
    pub rk4: Rk4Options,
    pub flags: Flags,
    pub output: OutputSection,
    pub workers: Option<usize>,
    pub figure: Option<u8>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Deterministic,
            model: ModelParams::default(),
            optimization: OptimizationSection::default(),
            simulate: SimulateSection::default(),
            sweep: SweepSection::default(),
            rk4: Rk4Options::default(),
            flags: Flags::default(),
            output: OutputSection::default(),
            workers: None,
            figure: None,
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    /// File (or defaults) with the command-line flags applied on top.
    pub fn resolve(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(p) = &cli.out {
            cfg.output.path = Some(p.clone());
        }
        if let Some(f) = cli.format {
            cfg.output.format = f;
        }
        if let Some(dt) = cli.dt {
            cfg.rk4.dt = dt;
        }
        if let Some(eps) = cli.epsilon {
            cfg.optimization.epsilon = Some(eps);
        }
        if let Some(gamma) = cli.gamma {
            cfg.model.gamma_meas = gamma;
            cfg.optimization.gamma_set = vec![gamma];
        }
        if let Some(nu1) = cli.nu1 {
            cfg.model.nu1 = nu1;
            cfg.optimization.nu1_min = nu1;
            cfg.optimization.nu1_max = nu1;
            cfg.optimization.nu1_count = 1;
            cfg.optimization.include_untriggered = false;
        }
        if let Some(ts) = cli.ts {
            cfg.simulate.t_switch = ts;
            cfg.optimization.ts_stop = ts;
        }
        if let Some(mode) = cli.mode {
            cfg.mode = mode.into();
        }
        if let Some(w) = cli.workers {
            cfg.workers = Some(w);
        }
        if let Some(f) = cli.figure {
            cfg.figure = Some(f);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| config_error(e.to_string()))?;
        if self.workers == Some(0) {
            return Err(config_error("workers must be at least 1"));
        }
        if !(self.rk4.dt.is_finite() && self.rk4.dt > 0.0) {
            return Err(config_error(format!("dt must be positive, got {}", self.rk4.dt)));
        }
        let s = &self.simulate;
        if !(s.t_switch >= 0.0 && s.t_end >= 0.0 && s.sample_step > 0.0 && s.t_end.is_finite()) {
            return Err(config_error("simulate needs t_switch, t_end >= 0 and sample_step > 0"));
        }
        if let Some(eps) = self.optimization.epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(config_error(format!("epsilon must lie in (0, 1), got {eps}")));
            }
        }
        Ok(())
    }

    pub fn pathway(&self) -> RatePathway {
        if self.flags.use_approx_rates {
            RatePathway::Approximate
        } else {
            RatePathway::Exact
        }
    }

    pub fn feedback(&self) -> FeedbackOptions {
        FeedbackOptions { keep_measurement_after_stop: self.flags.keep_measurement_after_stop }
    }

    pub fn output_path(&self) -> Result<&Path, CliError> {
        self.output.path.as_deref().ok_or_else(|| config_error("no output path (use --out or [output] path)"))
    }

    pub fn optimization_config(&self) -> Result<OptimizationConfig, CliError> {
        let o = &self.optimization;
        let epsilon = o.epsilon.ok_or_else(|| config_error("epsilon is required (use --epsilon)"))?;
        let nu1_grid = if o.nu1_count == 1 || o.nu1_min == o.nu1_max {
            vec![o.nu1_min]
        } else {
            log_grid(o.nu1_min, o.nu1_max, o.nu1_count).map_err(|e| config_error(e.to_string()))?
        };
        let cfg = OptimizationConfig {
            epsilon,
            ts_grid: step_grid(o.ts_start, o.ts_stop, o.ts_step).map_err(|e| config_error(e.to_string()))?,
            nu1_grid,
            gamma_set: o.gamma_set.clone(),
            time_tol: o.time_tol,
            include_untriggered: o.include_untriggered,
            include_open_loop: o.include_open_loop,
            pathway: self.pathway(),
            feedback: self.feedback(),
            method: o.method,
            rk4: self.rk4,
            workers: self.workers,
        };
        cfg.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            mode = "threshold"
            [model]
            omega = 0.05
            [optimization]
            epsilon = 0.01
            gamma_set = [10.0]
            [flags]
            use_approx_rates = true
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Threshold);
        assert_eq!(cfg.model.omega, 0.05);
        assert_eq!(cfg.model.g, ModelParams::default().g);
        let o = cfg.optimization_config().unwrap();
        assert_eq!(o.gamma_set, vec![10.0]);
        assert_eq!(o.pathway, RatePathway::Approximate);
        assert_eq!(o.ts_grid.len(), 201);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nomgea = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[simulate]\nt_swich = 1.0\n").is_err());
    }

    #[test]
    fn epsilon_required_for_optimization() {
        assert!(RunConfig::default().optimization_config().is_err());
    }
}
