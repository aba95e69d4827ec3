//! Reproduction jobs for the stopping-time curve and the Ω and g sweeps,
//! compared against [`crate::reference`].

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::generator::ModelParams;
use crate::optimize::{
    best_per_coupling, calibrate_epsilon, is_unimodal, merge_open_loop, p_curves, pair_grid,
    step_grid, sweep_omega, Mode, OptResult, OptimizationConfig, PairPoint,
};
use crate::reference::*;

/// Couplings covered by the dominance check: the g sweep plus its lower edge.
pub const DOMINANCE_GS: [f64; 10] = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproductionConfig {
    /// Model of the single stopping-time curve.
    pub fig3: ModelParams,
    pub fig3_ts: Vec<f64>,
    /// Spontaneous emission rate used by both sweeps.
    pub sweep_gamma_sp: f64,
    /// Search settings for the sweeps; its epsilon is replaced by the calibrated one.
    pub optimization: OptimizationConfig,
    /// Skip calibration and use this cap.
    pub epsilon: Option<f64>,
    pub epsilon_bracket: (f64, f64),
    /// Absolute tolerance on each swept point.
    pub tolerance: f64,
}

impl Default for ReproductionConfig {
    fn default() -> Self {
        Self {
            fig3: ModelParams { omega: 0.1, g: 0.1, gamma_sp: 0.001, ..Default::default() },
            fig3_ts: step_grid(0.0, 100.0, 0.5).expect("static grid"),
            sweep_gamma_sp: 1e-4,
            optimization: OptimizationConfig {
                ts_grid: step_grid(0.0, 400.0, 0.5).expect("static grid"),
                ..Default::default()
            },
            epsilon: None,
            epsilon_bracket: (1e-6, 0.5),
            tolerance: 0.03,
        }
    }
}

impl ReproductionConfig {
    pub fn sweep_params(&self, omega: f64, g: f64) -> ModelParams {
        ModelParams { omega, g, gamma_sp: self.sweep_gamma_sp, ..self.fig3.clone() }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> OptimizationConfig {
        OptimizationConfig { epsilon, ..self.optimization.clone() }
    }
}

/// The override if set, else the ε reproducing the open-loop anchor.
pub fn calibrate(cfg: &ReproductionConfig) -> Result<f64> {
    if let Some(eps) = cfg.epsilon {
        return Ok(eps);
    }
    let (lo, hi) = cfg.epsilon_bracket;
    let anchor = cfg.sweep_params(ANCHOR_OMEGA, ANCHOR_G);
    let eps = calibrate_epsilon(&anchor, ANCHOR_P1, &cfg.with_epsilon(hi), lo, hi)?;
    info!("calibrated epsilon = {eps:.9e}");
    Ok(eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure3Checks {
    pub p0_starts_at_one: bool,
    pub p0_decreasing: bool,
    /// p1 rises to one maximum strictly inside the window, then declines.
    pub p1_interior_peak: bool,
    pub p2_nondecreasing: bool,
    pub t_peak: f64,
}

impl Figure3Checks {
    pub fn all(&self) -> bool {
        self.p0_starts_at_one && self.p0_decreasing && self.p1_interior_peak && self.p2_nondecreasing
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure3 {
    /// `[T_s, p0, p1, p2plus]` per stopping time.
    pub rows: Vec<[f64; 4]>,
    pub checks: Figure3Checks,
}

pub fn figure3(cfg: &ReproductionConfig) -> Result<Figure3> {
    let c = p_curves(&cfg.fig3, Mode::Deterministic, &cfg.fig3_ts, &cfg.optimization)?;
    let jitter = 1e-12;
    let n = c.ts.len();
    let peak = (0..n).fold(0, |b, k| if c.p1[k] > c.p1[b] { k } else { b });
    let checks = Figure3Checks {
        p0_starts_at_one: n > 0 && (c.p0[0] - 1.0).abs() < 1e-9,
        p0_decreasing: n > 1 && c.p0.windows(2).all(|w| w[1] <= w[0] + jitter) && c.p0[n - 1] < c.p0[0],
        p1_interior_peak: n > 2 && peak > 0 && peak < n - 1 && is_unimodal(&c.p1) && c.p1[n - 1] < c.p1[peak],
        p2_nondecreasing: c.p2plus.windows(2).all(|w| w[1] >= w[0] - jitter),
        t_peak: c.ts.get(peak).copied().unwrap_or(f64::NAN),
    };
    let rows = (0..n).map(|k| [c.ts[k], c.p0[k], c.p1[k], c.p2plus[k]]).collect();
    Ok(Figure3 { rows, checks })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub figure: u8,
    pub series: String,
    /// Ω for the pump sweep, g for the coupling sweep.
    pub x: f64,
    pub computed: f64,
    pub reference: f64,
    pub deviation: f64,
    /// The calibration point, matched by construction.
    pub anchor: bool,
    pub result: OptResult,
}

impl ComparisonRow {
    fn new(figure: u8, series: String, x: f64, reference: f64, anchor: bool, result: OptResult) -> Self {
        let computed = result.best_p1;
        Self { figure, series, x, computed, reference, deviation: (computed - reference).abs(), anchor, result }
    }
}

fn gamma_label(gamma: f64) -> String {
    format!("gamma={gamma}")
}

/// Ω sweep at g = 0.1: open loop, then one threshold search per measurement rate.
pub fn figure4(cfg: &ReproductionConfig, epsilon: f64) -> Result<Vec<ComparisonRow>> {
    let base = cfg.sweep_params(ANCHOR_OMEGA, ANCHOR_G);
    let opt = cfg.with_epsilon(epsilon);
    let mut rows = Vec::new();
    for (k, &gamma) in FIG4_GAMMAS.iter().enumerate() {
        let results = if gamma == 0.0 {
            sweep_omega(&base, &FIG4_OMEGAS, Mode::Deterministic, &opt)?
        } else {
            let single = OptimizationConfig { gamma_set: vec![gamma], ..opt.clone() };
            sweep_omega(&base, &FIG4_OMEGAS, Mode::Threshold, &single)?
        };
        for ((&omega, &reference), r) in FIG4_OMEGAS.iter().zip(&FIG4_P1[k]).zip(results) {
            let anchor = gamma == 0.0 && omega == ANCHOR_OMEGA;
            rows.push(ComparisonRow::new(4, gamma_label(gamma), omega, reference, anchor, r));
        }
        info!("pump sweep, gamma = {gamma} done");
    }
    Ok(rows)
}

/// Both modes on the full `(g, Ω)` grid, g-major.
pub fn coupling_grid(cfg: &ReproductionConfig, epsilon: f64, gs: &[f64]) -> Result<Vec<PairPoint>> {
    let base = cfg.sweep_params(ANCHOR_OMEGA, ANCHOR_G);
    pair_grid(&base, gs, &FIG4_OMEGAS, &cfg.with_epsilon(epsilon))
}

/// g sweep rows from a grid containing every coupling of [`FIG5_GS`].
pub fn figure5_rows(pairs: &[PairPoint]) -> Result<Vec<ComparisonRow>> {
    let chosen: Vec<PairPoint> =
        pairs.iter().filter(|p| FIG5_GS.contains(&p.g)).copied().collect();
    let best = best_per_coupling(&chosen, &FIG5_GS)?;
    let mut rows = Vec::new();
    for (k, b) in best.iter().enumerate() {
        let anchor = b.g == ANCHOR_G;
        rows.push(ComparisonRow::new(5, "deterministic".into(), b.g, FIG5_DETERMINISTIC[k], anchor, b.deterministic));
    }
    for (k, b) in best.iter().enumerate() {
        rows.push(ComparisonRow::new(5, "threshold".into(), b.g, FIG5_THRESHOLD[k], false, b.threshold));
    }
    Ok(rows)
}

pub fn figure5(cfg: &ReproductionConfig, epsilon: f64) -> Result<Vec<ComparisonRow>> {
    figure5_rows(&coupling_grid(cfg, epsilon, &FIG5_GS)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceRow {
    pub omega: f64,
    pub g: f64,
    pub deterministic: f64,
    /// Closed-loop search alone.
    pub threshold: f64,
    /// Closed-loop search with the open-loop point added.
    pub with_open_loop: f64,
}

impl DominanceRow {
    pub fn holds(&self) -> bool {
        self.with_open_loop >= self.deterministic
    }
}

pub fn dominance_rows(pairs: &[PairPoint]) -> Vec<DominanceRow> {
    pairs
        .iter()
        .map(|p| DominanceRow {
            omega: p.omega,
            g: p.g,
            deterministic: p.deterministic.best_p1,
            threshold: p.threshold.best_p1,
            with_open_loop: merge_open_loop(p.threshold, &p.deterministic).best_p1,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orderings {
    /// Pump rates where γ = 10 > 1 > 0.1 > 0 fails.
    pub fig4_violations: Vec<f64>,
    pub fig5_threshold_spread: f64,
    /// Open-loop p1 at the smallest coupling minus at the largest.
    pub fig5_deterministic_drop: f64,
}

impl Orderings {
    pub fn fig4_ordered(&self) -> bool {
        self.fig4_violations.is_empty()
    }

    pub fn fig5_threshold_flat(&self) -> bool {
        self.fig5_threshold_spread < 0.02
    }

    pub fn fig5_deterministic_falls(&self) -> bool {
        self.fig5_deterministic_drop > 0.3
    }

    pub fn all(&self) -> bool {
        self.fig4_ordered() && self.fig5_threshold_flat() && self.fig5_deterministic_falls()
    }
}

fn series<'a>(rows: &'a [ComparisonRow], name: &str) -> Vec<&'a ComparisonRow> {
    let mut s: Vec<&ComparisonRow> = rows.iter().filter(|r| r.series == name).collect();
    s.sort_by(|a, b| a.x.total_cmp(&b.x));
    s
}

pub fn orderings(fig4: &[ComparisonRow], fig5: &[ComparisonRow]) -> Orderings {
    let curves: Vec<Vec<&ComparisonRow>> = FIG4_GAMMAS.iter().map(|&g| series(fig4, &gamma_label(g))).collect();
    let mut fig4_violations = Vec::new();
    for (k, &omega) in FIG4_OMEGAS.iter().enumerate() {
        let at: Option<Vec<f64>> = curves.iter().map(|c| c.get(k).map(|r| r.computed)).collect();
        let ordered = at.is_some_and(|v| v.windows(2).all(|w| w[1] > w[0]));
        if !ordered {
            fig4_violations.push(omega);
        }
    }
    let thr: Vec<f64> = series(fig5, "threshold").iter().map(|r| r.computed).collect();
    let det: Vec<f64> = series(fig5, "deterministic").iter().map(|r| r.computed).collect();
    let spread = thr.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - thr.iter().copied().fold(f64::INFINITY, f64::min);
    let drop = match (det.first(), det.last()) {
        (Some(a), Some(b)) => a - b,
        _ => f64::NAN,
    };
    Orderings { fig4_violations, fig5_threshold_spread: spread, fig5_deterministic_drop: drop }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub epsilon: f64,
    pub tolerance: f64,
    pub figure4: Vec<ComparisonRow>,
    pub figure5: Vec<ComparisonRow>,
    pub dominance: Vec<DominanceRow>,
    pub orderings: Orderings,
}

impl Report {
    /// All compared points except the calibration anchor.
    pub fn checked_rows(&self) -> impl Iterator<Item = &ComparisonRow> {
        self.figure4.iter().chain(&self.figure5).filter(|r| !r.anchor)
    }

    pub fn failures(&self) -> Vec<&ComparisonRow> {
        self.checked_rows().filter(|r| !(r.deviation <= self.tolerance)).collect()
    }

    pub fn max_deviation(&self) -> f64 {
        self.checked_rows().map(|r| r.deviation).fold(0.0, f64::max)
    }

    pub fn quantitative_match(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn dominance_holds(&self) -> bool {
        !self.dominance.is_empty() && self.dominance.iter().all(DominanceRow::holds)
    }
}

/// Calibration, both sweeps, the dominance grid and the ordering checks.
pub fn full_report(cfg: &ReproductionConfig) -> Result<Report> {
    let epsilon = calibrate(cfg)?;
    let figure4 = figure4(cfg, epsilon)?;
    let pairs = coupling_grid(cfg, epsilon, &DOMINANCE_GS)?;
    let figure5 = figure5_rows(&pairs)?;
    let orderings = orderings(&figure4, &figure5);
    Ok(Report { epsilon, tolerance: cfg.tolerance, figure4, figure5, dominance: dominance_rows(&pairs), orderings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::{Argmax, Branch};

    fn result(p1: f64) -> OptResult {
        OptResult {
            mode: Mode::Deterministic,
            omega: 0.1,
            g: 0.1,
            epsilon: 0.01,
            best_p1: p1,
            p0_at_opt: 1.0 - p1,
            p2_at_opt: 0.0,
            argmax: Argmax { t_s: 1.0, nu1: None, gamma: None, tau: None, nu0: None },
            t_epsilon: None,
            t_max: 1.0,
            branch: Branch::InteriorMaximum,
        }
    }

    #[test]
    fn fig3_shape() {
        let f = figure3(&ReproductionConfig::default()).unwrap();
        assert_eq!(f.rows.len(), 201);
        assert!(f.checks.all(), "{:?}", f.checks);
    }

    #[test]
    fn calibration_reproduces_anchor() {
        let cfg = ReproductionConfig::default();
        let eps = calibrate(&cfg).unwrap();
        let r = crate::optimize::optimal_deterministic(&cfg.sweep_params(0.1, 0.1), &cfg.with_epsilon(eps)).unwrap();
        assert!((r.best_p1 - ANCHOR_P1).abs() < 1e-6, "{}", r.best_p1);
        let fixed = ReproductionConfig { epsilon: Some(0.02), ..cfg };
        assert_eq!(calibrate(&fixed).unwrap(), 0.02);
    }

    #[test]
    fn ordering_checks() {
        let mut fig4 = Vec::new();
        for (k, &gamma) in FIG4_GAMMAS.iter().enumerate() {
            for (&omega, &p) in FIG4_OMEGAS.iter().zip(&FIG4_P1[k]) {
                fig4.push(ComparisonRow::new(4, gamma_label(gamma), omega, p, false, result(p)));
            }
        }
        let mut fig5 = Vec::new();
        for (k, &g) in FIG5_GS.iter().enumerate() {
            fig5.push(ComparisonRow::new(5, "deterministic".into(), g, 0.0, false, result(FIG5_DETERMINISTIC[k])));
            fig5.push(ComparisonRow::new(5, "threshold".into(), g, 0.0, false, result(FIG5_THRESHOLD[k])));
        }
        // the reference curves satisfy every ordering
        let o = orderings(&fig4, &fig5);
        assert!(o.all(), "{o:?}");

        fig4[5].computed = 0.99; // γ = 0 above γ = 10 at Ω = 0.06
        let o = orderings(&fig4, &fig5);
        assert_eq!(o.fig4_violations, vec![0.06]);
    }

    #[test]
    fn dominance_uses_open_loop() {
        let mut thr = result(0.4);
        thr.mode = Mode::Threshold;
        let p = PairPoint { omega: 0.1, g: 0.1, deterministic: result(0.5), threshold: thr };
        let d = dominance_rows(&[p])[0];
        assert_eq!((d.threshold, d.with_open_loop), (0.4, 0.5));
        assert!(d.holds());
    }
}
