use std::path::Path;

use log::info;
use serde_json::{json, Value};

use sps_feedback::algebra::SpaceDescriptor;
use sps_feedback::generator::{GeneratorTerms, ModelKind, ModelParams, Phase};
use sps_feedback::observables::{control_on_population, emission_stats, TrajectoryRow};
use sps_feedback::optimize::{optimize as optimize_point, ordered_map, step_grid, Mode, OptResult};
use sps_feedback::propagate::{asymptotic_state_cross_checked, SwitchPlan, TwoPhaseSolver};
use sps_feedback::reproduce::{
    calibrate, figure3, figure4, figure5, orderings, ComparisonRow, ReproductionConfig,
};
use sps_feedback::DensityState;

use crate::config::{Format, RunConfig};
use crate::output::{label, to_value, write_csv, write_json, Cell};
use crate::CliError;

/// Cap on the RK4 run used to cross-check the asymptotic state.
const CROSS_CHECK_T_CAP: f64 = 1e4;

fn model_for(cfg: &RunConfig) -> Result<(ModelKind, SpaceDescriptor, ModelParams), CliError> {
    match cfg.mode {
        Mode::Deterministic => Ok((ModelKind::Deterministic, SpaceDescriptor::deterministic(), cfg.model.clone())),
        Mode::Threshold => {
            let m = &cfg.model;
            // ν₀ and τ follow from ν₁ unless given explicitly
            let p = if m.nu1 > 0.0 && m.nu0 == 0.0 && m.tau.is_none() {
                m.with_threshold_rates(m.nu1, cfg.pathway())?
            } else {
                m.clone()
            };
            Ok((ModelKind::Feedback, SpaceDescriptor::feedback(), p))
        }
    }
}

fn trace_error(rho: &DensityState) -> f64 {
    (rho.trace() - num_complex::Complex64::from(1.0)).norm()
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.output_path()?;
    let (kind, space, params) = model_for(cfg)?;
    if kind == ModelKind::Feedback {
        params.warn_if_outside_regime();
    }
    let terms = GeneratorTerms::new(kind, &space)?.populations()?;
    let on = terms.assemble(&params, Phase::PumpingOn, cfg.feedback())?;
    let off = terms.assemble(&params, Phase::PumpingOff, cfg.feedback())?;
    let initial = DensityState::initial(&space)?;
    let solver = TwoPhaseSolver::new(on, off, &initial, cfg.simulate.method, cfg.rk4)?;
    let plan = SwitchPlan::new(cfg.simulate.t_switch)?;

    let times = step_grid(0.0, cfg.simulate.t_end, cfg.simulate.sample_step)?;
    let traj = solver.trajectory(plan, &times)?;
    let rows = traj.iter().map(TrajectoryRow::from_state).collect::<Result<Vec<_>, _>>()?;
    let asymptotic = solver.asymptotic_state(plan)?;
    let stats = emission_stats(&asymptotic)?;
    let at_switch = solver.trajectory(plan, &[plan.t_switch])?.remove(0);

    let max_trace_error = traj.iter().chain([&asymptotic]).map(trace_error).fold(0.0, f64::max);
    let agreement = if cfg.flags.validate_cross_method {
        let (_, d) = asymptotic_state_cross_checked(solver.off(), &at_switch, cfg.rk4, CROSS_CHECK_T_CAP)?;
        Some(d)
    } else {
        None
    };
    let summary = json!({
        "t_switch": plan.t_switch,
        "asymptotic": stats,
        "control_on_at_switch": control_on_population(&at_switch).ok(),
        "derived_params": params,
    });
    let diagnostics = json!({
        "trace_error": max_trace_error,
        "method_agreement_residual": agreement,
        "pumping_spectral": solver.is_spectral(),
        "eigenvector_condition": solver.condition(),
        "kernel_gap": solver.projector().gap(),
    });
    info!("asymptotic p0 = {}, p1 = {}, p2plus = {}", stats.p0, stats.p1, stats.p2plus);

    match cfg.output.format {
        Format::Csv => {
            let cells = rows.iter().map(|r| r.values().into_iter().map(Cell::from).collect()).collect();
            write_csv(path, &TrajectoryRow::HEADER, cells)?;
            write_json(&path.with_extension("summary.json"), to_value(cfg), summary, diagnostics)
        }
        Format::Json => {
            let result = json!({ "summary": summary, "trajectory": rows });
            write_json(path, to_value(cfg), result, diagnostics)
        }
    }
}

const RESULT_HEADER: [&str; 15] = [
    "mode", "omega", "g", "epsilon", "best_p1", "p0_at_opt", "p2_at_opt", "t_s", "nu1", "gamma", "tau", "nu0",
    "t_epsilon", "t_max", "branch",
];

fn result_cells(r: &OptResult) -> Vec<Cell> {
    vec![
        label(&r.mode).into(),
        r.omega.into(),
        r.g.into(),
        r.epsilon.into(),
        r.best_p1.into(),
        r.p0_at_opt.into(),
        r.p2_at_opt.into(),
        r.argmax.t_s.into(),
        r.argmax.nu1.into(),
        r.argmax.gamma.into(),
        r.argmax.tau.into(),
        r.argmax.nu0.into(),
        r.t_epsilon.into(),
        r.t_max.into(),
        label(&r.branch).into(),
    ]
}

fn write_results(cfg: &RunConfig, path: &Path, results: &[OptResult]) -> Result<(), CliError> {
    match cfg.output.format {
        Format::Csv => write_csv(path, &RESULT_HEADER, results.iter().map(result_cells).collect()),
        Format::Json => {
            let worst_p2 = results.iter().map(|r| r.p2_at_opt - r.epsilon).fold(f64::NEG_INFINITY, f64::max);
            write_json(path, to_value(cfg), to_value(&results), json!({ "max_p2_over_epsilon": worst_p2 }))
        }
    }
}

pub fn optimize(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.output_path()?;
    let opt = cfg.optimization_config()?;
    let r = optimize_point(&cfg.model, cfg.mode, &opt)?;
    write_results(cfg, path, &[r])
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.output_path()?;
    let opt = cfg.optimization_config()?;
    let omegas = sorted(&cfg.sweep.omegas);
    let gs = if cfg.sweep.gs.is_empty() { vec![cfg.model.g] } else { sorted(&cfg.sweep.gs) };
    if omegas.is_empty() {
        return Err(CliError::Config("sweep needs at least one pump rate".into()));
    }
    let jobs: Vec<(f64, f64)> = gs.iter().flat_map(|&g| omegas.iter().map(move |&o| (g, o))).collect();
    let results = ordered_map(cfg.workers, &jobs, |&(g, omega)| {
        optimize_point(&ModelParams { omega, g, ..cfg.model.clone() }, cfg.mode, &opt)
    })?;
    write_results(cfg, path, &results)
}

fn reproduction_config(cfg: &RunConfig) -> ReproductionConfig {
    let mut rep = ReproductionConfig::default();
    rep.epsilon = cfg.optimization.epsilon;
    rep.optimization.workers = cfg.workers;
    rep.optimization.rk4 = cfg.rk4;
    rep.optimization.pathway = cfg.pathway();
    rep.optimization.feedback = cfg.feedback();
    rep
}

const COMPARISON_HEADER: [&str; 7] = ["figure", "series", "x", "computed", "reference", "deviation", "anchor"];

fn write_comparison(
    cfg: &RunConfig,
    path: &Path,
    epsilon: f64,
    rows: &[ComparisonRow],
    checks: Value,
) -> Result<(), CliError> {
    let worst = rows.iter().filter(|r| !r.anchor).map(|r| r.deviation).fold(0.0, f64::max);
    match cfg.output.format {
        Format::Csv => {
            let cells = rows
                .iter()
                .map(|r| {
                    vec![
                        f64::from(r.figure).into(),
                        r.series.as_str().into(),
                        r.x.into(),
                        r.computed.into(),
                        r.reference.into(),
                        r.deviation.into(),
                        r.anchor.into(),
                    ]
                })
                .collect();
            info!("epsilon = {epsilon}, max deviation = {worst}");
            write_csv(path, &COMPARISON_HEADER, cells)
        }
        Format::Json => write_json(
            path,
            to_value(cfg),
            json!({ "epsilon": epsilon, "rows": rows }),
            json!({ "max_deviation": worst, "checks": checks }),
        ),
    }
}

pub fn figure(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.output_path()?;
    let rep = reproduction_config(cfg);
    match cfg.figure {
        Some(3) => {
            let f = figure3(&rep)?;
            match cfg.output.format {
                Format::Csv => {
                    let cells = f.rows.iter().map(|r| r.iter().map(|&x| Cell::from(x)).collect()).collect();
                    write_csv(path, &["T_s", "p0", "p1", "p2plus"], cells)
                }
                Format::Json => write_json(path, to_value(cfg), to_value(&f.rows), to_value(&f.checks)),
            }
        }
        Some(4) => {
            let eps = calibrate(&rep)?;
            let rows = figure4(&rep, eps)?;
            let o = orderings(&rows, &[]);
            write_comparison(cfg, path, eps, &rows, json!({ "gamma_order_violations": o.fig4_violations }))
        }
        Some(5) => {
            let eps = calibrate(&rep)?;
            let rows = figure5(&rep, eps)?;
            let o = orderings(&[], &rows);
            let checks = json!({
                "threshold_spread": o.fig5_threshold_spread,
                "deterministic_drop": o.fig5_deterministic_drop,
            });
            write_comparison(cfg, path, eps, &rows, checks)
        }
        Some(n) => Err(CliError::Config(format!("unknown figure {n}; expected 3, 4 or 5"))),
        None => Err(CliError::Config("figure needs --figure 3|4|5".into())),
    }
}
