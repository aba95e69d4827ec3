//! Choice of the stopping time, and of the threshold-switching parameters,
//! that maximize the single-photon probability under a cap on multi-photon
//! emission.

use std::sync::{Arc, Mutex};

use log::debug;
use ndarray::Array1;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::SpaceDescriptor;
use crate::error::{invalid, Error, Result};
use crate::generator::{FeedbackOptions, GeneratorTerms, ModelKind, ModelParams, Phase};
use crate::observables::{bath_functionals, EmissionStats};
use crate::propagate::{KernelProjector, Method, ModalSeries, Rk4Options, TwoPhaseSolver};
use crate::rates::RatePathway;
use crate::DensityState;

/// `start, start + step, …` up to and including `stop` (within rounding).
pub fn step_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && stop >= start && start.is_finite() && stop.is_finite()) {
        return Err(invalid(format!("bad grid {start}..{stop} step {step}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && n >= 2) {
        return Err(invalid(format!("bad log grid {lo}..{hi} with {n} points")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|k| match k {
            0 => lo,
            k if k == n - 1 => hi,
            k => (a + (b - a) * k as f64 / (n - 1) as f64).exp(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[serde(alias = "det")]
    Deterministic,
    Threshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    /// Cap ε on the two-or-more photon probability.
    pub epsilon: f64,
    pub ts_grid: Vec<f64>,
    pub nu1_grid: Vec<f64>,
    pub gamma_set: Vec<f64>,
    /// Tolerance on refined stopping times.
    pub time_tol: f64,
    /// Also try `ν₁ = 0` (measurement without switching) for every γ.
    pub include_untriggered: bool,
    /// Also try the open-loop configuration (γ = 0, ν = 0).
    pub include_open_loop: bool,
    pub pathway: RatePathway,
    pub feedback: FeedbackOptions,
    pub method: Method,
    pub rk4: Rk4Options,
    /// Worker threads; `None` uses all cores.
    pub workers: Option<usize>,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            epsilon: f64::NAN,
            ts_grid: step_grid(0.0, 100.0, 0.5).expect("static grid"),
            nu1_grid: log_grid(0.1, 10.0, 24).expect("static grid"),
            gamma_set: vec![0.1, 1.0, 10.0],
            time_tol: 1e-4,
            include_untriggered: true,
            include_open_loop: false,
            pathway: RatePathway::Exact,
            feedback: FeedbackOptions::default(),
            method: Method::Auto,
            rk4: Rk4Options::default(),
            workers: None,
        }
    }
}

impl OptimizationConfig {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.ts_grid.is_empty() || !sorted(&self.ts_grid) || self.ts_grid[0] < 0.0 {
            return Err(invalid("ts_grid must be nonempty, increasing and non-negative"));
        }
        if self.nu1_grid.is_empty() || !sorted(&self.nu1_grid) || self.nu1_grid[0] <= 0.0 {
            return Err(invalid("nu1_grid must be nonempty, increasing and positive"));
        }
        if self.gamma_set.is_empty() || self.gamma_set.iter().any(|g| !(*g > 0.0)) {
            return Err(invalid("gamma_set must be nonempty and positive"));
        }
        if !(self.time_tol > 0.0) {
            return Err(invalid("time_tol must be positive"));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers must be at least 1"));
        }
        Ok(())
    }
}

/// Runs `f` over `items` in parallel, keeping input order.
pub fn ordered_map<T, R, F>(workers: Option<usize>, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if rayon::current_thread_index().is_some() {
        return items.par_iter().map(&f).collect();
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Asymptotic photon statistics as a function of the stopping time.
pub struct EmissionCurve {
    solver: TwoPhaseSolver,
    functionals: [Array1<C64>; 3],
    series: Option<[ModalSeries; 3]>,
    /// Pumped states already computed, sorted by time, used as starting
    /// points when the solver steps numerically.
    anchors: Mutex<Vec<(f64, Array1<C64>)>>,
}

impl EmissionCurve {
    pub fn new(solver: TwoPhaseSolver) -> Result<Self> {
        let functionals = bath_functionals(solver.basis());
        let series = if solver.is_spectral() {
            let mut out = Vec::with_capacity(3);
            for f in &functionals {
                out.push(solver.asymptotic_series(f)?.expect("spectral solver"));
            }
            let [a, b, c]: [ModalSeries; 3] = out.try_into().expect("three series");
            Some([a, b, c])
        } else {
            None
        };
        let anchors = Mutex::new(vec![(0.0, solver.initial_coords().clone())]);
        Ok(Self { solver, functionals, series, anchors })
    }

    pub fn solver(&self) -> &TwoPhaseSolver {
        &self.solver
    }

    fn stats_from_pumped(&self, x: &Array1<C64>) -> Result<EmissionStats> {
        let y = self.solver.relax(x);
        let p = |k: usize| self.functionals[k].dot(&y).re;
        EmissionStats::new(p(0), p(1), p(2), None)
    }

    pub fn stats_many(&self, ts: &[f64]) -> Result<Vec<EmissionStats>> {
        if let Some(s) = &self.series {
            return ts
                .iter()
                .map(|&t| EmissionStats::new(s[0].eval(t), s[1].eval(t), s[2].eval(t), None))
                .collect();
        }
        if let [t] = ts {
            return Ok(vec![self.stats(*t)?]);
        }
        let xs = self.solver.pumped_coords(ts)?;
        let mut anchors = self.anchors.lock().expect("anchor lock");
        for (&t, x) in ts.iter().zip(&xs) {
            if let Err(k) = anchors.binary_search_by(|(a, _)| a.total_cmp(&t)) {
                anchors.insert(k, (t, x.clone()));
            }
        }
        drop(anchors);
        xs.iter().map(|x| self.stats_from_pumped(x)).collect()
    }

    pub fn stats(&self, t: f64) -> Result<EmissionStats> {
        if self.series.is_some() {
            return Ok(self.stats_many(&[t, t])?[0]);
        }
        if !(t.is_finite() && t >= 0.0) {
            return Err(invalid(format!("stopping time must be non-negative, got {t}")));
        }
        let (t0, x0) = {
            let anchors = self.anchors.lock().expect("anchor lock");
            let k = anchors.partition_point(|(a, _)| *a <= t);
            anchors[k - 1].clone()
        };
        self.stats_from_pumped(&self.solver.advance_pumped(&x0, t - t0)?)
    }
}

/// Photon statistics sampled on a stopping-time grid, with the underlying
/// curve kept for refinement between grid points.
pub struct Curves {
    pub ts: Vec<f64>,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    pub p2plus: Vec<f64>,
    pub curve: Arc<EmissionCurve>,
}

impl Curves {
    pub fn sample(curve: Arc<EmissionCurve>, ts: &[f64]) -> Result<Self> {
        let stats = curve.stats_many(ts)?;
        Ok(Self {
            ts: ts.to_vec(),
            p0: stats.iter().map(|s| s.p0).collect(),
            p1: stats.iter().map(|s| s.p1).collect(),
            p2plus: stats.iter().map(|s| s.p2plus).collect(),
            curve,
        })
    }
}

fn model_space(mode: Mode) -> (ModelKind, SpaceDescriptor) {
    match mode {
        Mode::Deterministic => (ModelKind::Deterministic, SpaceDescriptor::deterministic()),
        Mode::Threshold => (ModelKind::Feedback, SpaceDescriptor::feedback()),
    }
}

/// Assembles solvers for many parameter points of one model, sharing the
/// sector-restricted channels and, where possible, the pumping-off kernel.
struct SolverFactory {
    terms: GeneratorTerms,
    initial: DensityState,
    opts: FeedbackOptions,
    method: Method,
    rk4: Rk4Options,
}

impl SolverFactory {
    fn new(mode: Mode, cfg: &OptimizationConfig) -> Result<Self> {
        let (kind, space) = model_space(mode);
        let terms = GeneratorTerms::new(kind, &space)?.populations()?;
        Ok(Self {
            terms,
            initial: DensityState::initial(&space)?,
            opts: cfg.feedback,
            method: cfg.method,
            rk4: cfg.rk4,
        })
    }

    fn off_projector(&self, params: &ModelParams) -> Result<KernelProjector> {
        KernelProjector::new(&self.terms.assemble(params, Phase::PumpingOff, self.opts)?)
    }

    /// The pumping-off generator does not depend on the measurement channels
    /// unless they are kept after the stop.
    fn off_shared(&self) -> bool {
        self.terms.kind() == ModelKind::Deterministic || !self.opts.keep_measurement_after_stop
    }

    fn curve(&self, params: &ModelParams, projector: Option<&KernelProjector>) -> Result<EmissionCurve> {
        let on = self.terms.assemble(params, Phase::PumpingOn, self.opts)?;
        let off = self.terms.assemble(params, Phase::PumpingOff, self.opts)?;
        let projector = match projector {
            Some(p) => p.clone(),
            None => KernelProjector::new(&off)?,
        };
        let solver =
            TwoPhaseSolver::with_projector(on, off, projector, &self.initial, self.method, self.rk4)?;
        EmissionCurve::new(solver)
    }
}

/// Asymptotic p0, p1, p2plus against the stopping time.
pub fn p_curves(
    params: &ModelParams,
    mode: Mode,
    ts_grid: &[f64],
    cfg: &OptimizationConfig,
) -> Result<Curves> {
    params.validate()?;
    let factory = SolverFactory::new(mode, cfg)?;
    Curves::sample(Arc::new(factory.curve(params, None)?), ts_grid)
}

/// Largest time not exceeding the first grid crossing of `p2plus = ε` at
/// which `p2plus ≤ ε`, refined by bisection to `tol`. `None` when the grid
/// never crosses.
pub fn find_t_epsilon(curves: &Curves, epsilon: f64, tol: f64) -> Result<Option<f64>> {
    let Some(k) = curves.p2plus.iter().position(|&p| p > epsilon) else {
        return Ok(None);
    };
    if k == 0 {
        return Ok(Some(curves.ts[0]));
    }
    let (mut lo, mut hi) = (curves.ts[k - 1], curves.ts[k]);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if curves.curve.stats(mid)?.p2plus <= epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// True when `p` rises then falls at most once, up to 1e-12 jitter.
pub fn is_unimodal(p: &[f64]) -> bool {
    let mut falling = false;
    for w in p.windows(2) {
        let d = w[1] - w[0];
        if d < -1e-12 {
            falling = true;
        } else if d > 1e-12 && falling {
            return false;
        }
    }
    true
}

fn golden_max(f: &dyn Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

/// Stopping time maximizing p1: grid argmax (earliest on ties) refined by
/// golden-section search, or a fine local grid when the sampled curve is not
/// unimodal. Never returns less than the best grid value.
pub fn find_t_max(curves: &Curves, tol: f64) -> Result<(f64, f64)> {
    let n = curves.ts.len();
    if n == 0 {
        return Err(invalid("empty stopping-time grid"));
    }
    let mut i = 0;
    for k in 1..n {
        if curves.p1[k] > curves.p1[i] {
            i = k;
        }
    }
    let grid = (curves.ts[i], curves.p1[i]);
    if n == 1 {
        return Ok(grid);
    }
    let a = curves.ts[i.saturating_sub(1)];
    let b = curves.ts[(i + 1).min(n - 1)];
    let f = |t: f64| -> Result<f64> { Ok(curves.curve.stats(t)?.p1) };
    let refined = if is_unimodal(&curves.p1) {
        golden_max(&f, a, b, tol)?
    } else {
        debug!("p1 curve is not unimodal; refining on a fine grid");
        let m = (((b - a) / tol).ceil() as usize).clamp(2, 2000);
        let ts: Vec<f64> = (0..=m).map(|k| a + (b - a) * k as f64 / m as f64).collect();
        let stats = curves.curve.stats_many(&ts)?;
        let mut best = (ts[0], stats[0].p1);
        for (t, s) in ts.iter().zip(&stats) {
            if s.p1 > best.1 {
                best = (*t, s.p1);
            }
        }
        best
    };
    Ok(if refined.1 > grid.1 { refined } else { grid })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// Stopped at `t_ε` before p1 peaked.
    EpsilonLimited,
    /// Stopped at the p1 maximum, with the cap inactive.
    InteriorMaximum,
    /// Threshold search: the unconstrained joint maximum is admissible.
    JointMaximum,
    /// Threshold search: the cap binds at the joint maximum.
    EpsilonSaturated,
}

/// Optimal stopping on one curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopChoice {
    pub t_epsilon: Option<f64>,
    pub t_max: f64,
    pub p1_at_t_max: f64,
    pub p2_at_t_max: f64,
    pub t_opt: f64,
    pub stats: EmissionStats,
    pub branch: Branch,
}

/// `t_opt = min(t_ε, t_m)` on precomputed curves.
pub fn choose_stop(curves: &Curves, epsilon: f64, tol: f64) -> Result<StopChoice> {
    let t_eps = find_t_epsilon(curves, epsilon, tol)?;
    let (t_m, p1_m) = find_t_max(curves, tol)?;
    let at_max = curves.curve.stats(t_m)?;
    let (t_opt, branch) = match t_eps {
        Some(te) if te < t_m => (te, Branch::EpsilonLimited),
        _ => (t_m, Branch::InteriorMaximum),
    };
    let stats = if t_opt == t_m { at_max } else { curves.curve.stats(t_opt)? };
    Ok(StopChoice {
        t_epsilon: t_eps,
        t_max: t_m,
        p1_at_t_max: p1_m,
        p2_at_t_max: at_max.p2plus,
        t_opt,
        stats,
        branch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Argmax {
    pub t_s: f64,
    pub nu1: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub nu0: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub mode: Mode,
    pub omega: f64,
    pub g: f64,
    pub epsilon: f64,
    pub best_p1: f64,
    pub p0_at_opt: f64,
    pub p2_at_opt: f64,
    pub argmax: Argmax,
    pub t_epsilon: Option<f64>,
    pub t_max: f64,
    pub branch: Branch,
}

impl OptResult {
    fn from_choice(mode: Mode, p: &ModelParams, epsilon: f64, c: &StopChoice, argmax: Argmax) -> Self {
        Self {
            mode,
            omega: p.omega,
            g: p.g,
            epsilon,
            best_p1: c.stats.p1,
            p0_at_opt: c.stats.p0,
            p2_at_opt: c.stats.p2plus,
            argmax,
            t_epsilon: c.t_epsilon,
            t_max: c.t_max,
            branch: c.branch,
        }
    }
}

/// Open-loop pumping stopped at `min(t_ε, t_m)`.
pub fn optimal_deterministic(params: &ModelParams, cfg: &OptimizationConfig) -> Result<OptResult> {
    cfg.validate()?;
    let curves = p_curves(params, Mode::Deterministic, &cfg.ts_grid, cfg)?;
    let c = choose_stop(&curves, cfg.epsilon, cfg.time_tol)?;
    let argmax = Argmax { t_s: c.t_opt, nu1: None, gamma: None, tau: None, nu0: None };
    Ok(OptResult::from_choice(Mode::Deterministic, params, cfg.epsilon, &c, argmax))
}

struct Candidate {
    params: ModelParams,
    choice: StopChoice,
}

/// Best threshold-feedback configuration over `gamma_set × nu1_grid` and the
/// stopping time, with `ν₀` and `τ` derived from each `ν₁`.
pub fn optimal_threshold(params: &ModelParams, cfg: &OptimizationConfig) -> Result<OptResult> {
    cfg.validate()?;
    params.validate()?;
    let factory = SolverFactory::new(Mode::Threshold, cfg)?;
    let shared = if factory.off_shared() { Some(factory.off_projector(params)?) } else { None };

    let mut grid = Vec::new();
    for &gamma in &cfg.gamma_set {
        if cfg.include_untriggered {
            grid.push((gamma, 0.0));
        }
        grid.extend(cfg.nu1_grid.iter().map(|&nu1| (gamma, nu1)));
    }
    let evaluated = ordered_map(cfg.workers, &grid, |&(gamma, nu1)| -> Result<Option<Candidate>> {
        let base = ModelParams { gamma_meas: gamma, ..params.clone() };
        let p = match base.with_threshold_rates(nu1, cfg.pathway) {
            Ok(p) => p,
            Err(Error::Domain(msg)) => {
                debug!("skipping gamma = {gamma}, nu1 = {nu1}: {msg}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let curve = Arc::new(factory.curve(&p, shared.as_ref())?);
        let curves = Curves::sample(curve, &cfg.ts_grid)?;
        let choice = choose_stop(&curves, cfg.epsilon, cfg.time_tol)?;
        Ok(Some(Candidate { params: p, choice }))
    })?;
    let candidates: Vec<Candidate> = evaluated.into_iter().flatten().collect();
    if candidates.is_empty() {
        return Err(Error::Domain("no admissible threshold configuration on the grid".into()));
    }

    let first_max = |key: &dyn Fn(&Candidate) -> f64| {
        let mut best = 0;
        for (k, c) in candidates.iter().enumerate() {
            if key(c) > key(&candidates[best]) {
                best = k;
            }
        }
        best
    };
    let joint = first_max(&|c| c.choice.p1_at_t_max);
    let (pick, branch) = if candidates[joint].choice.p2_at_t_max <= cfg.epsilon {
        (joint, Branch::JointMaximum)
    } else {
        (first_max(&|c| c.choice.stats.p1), Branch::EpsilonSaturated)
    };
    let c = &candidates[pick];
    let argmax = Argmax {
        t_s: c.choice.t_opt,
        nu1: Some(c.params.nu1),
        gamma: Some(c.params.gamma_meas),
        tau: c.params.tau,
        nu0: Some(c.params.nu0),
    };
    let mut out = OptResult::from_choice(Mode::Threshold, params, cfg.epsilon, &c.choice, argmax);
    out.branch = branch;

    if cfg.include_open_loop {
        out = merge_open_loop(out, &optimal_deterministic(params, cfg)?);
    }
    Ok(out)
}

/// Adds the open-loop point (γ = 0, no switching) to a threshold result.
pub fn merge_open_loop(threshold: OptResult, det: &OptResult) -> OptResult {
    if det.best_p1 > threshold.best_p1 {
        OptResult {
            mode: Mode::Threshold,
            argmax: Argmax { gamma: Some(0.0), nu1: Some(0.0), nu0: Some(0.0), ..det.argmax },
            ..*det
        }
    } else {
        threshold
    }
}

pub fn optimize(params: &ModelParams, mode: Mode, cfg: &OptimizationConfig) -> Result<OptResult> {
    match mode {
        Mode::Deterministic => optimal_deterministic(params, cfg),
        Mode::Threshold => optimal_threshold(params, cfg),
    }
}

/// Optimized results for each pump rate, in input order.
pub fn sweep_omega(
    base: &ModelParams,
    omegas: &[f64],
    mode: Mode,
    cfg: &OptimizationConfig,
) -> Result<Vec<OptResult>> {
    ordered_map(cfg.workers, omegas, |&omega| optimize(&ModelParams { omega, ..base.clone() }, mode, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingPoint {
    pub g: f64,
    pub deterministic: OptResult,
    pub threshold: OptResult,
}

/// Both optimized modes at one `(Ω, g)` point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPoint {
    pub omega: f64,
    pub g: f64,
    pub deterministic: OptResult,
    pub threshold: OptResult,
}

/// Every `(g, Ω)` combination, g-major, each optimized in both modes.
pub fn pair_grid(
    base: &ModelParams,
    gs: &[f64],
    omegas: &[f64],
    cfg: &OptimizationConfig,
) -> Result<Vec<PairPoint>> {
    let jobs: Vec<(f64, f64)> = gs.iter().flat_map(|&g| omegas.iter().map(move |&o| (g, o))).collect();
    ordered_map(cfg.workers, &jobs, |&(g, omega)| -> Result<PairPoint> {
        let p = ModelParams { g, omega, ..base.clone() };
        Ok(PairPoint {
            omega,
            g,
            deterministic: optimal_deterministic(&p, cfg)?,
            threshold: optimal_threshold(&p, cfg)?,
        })
    })
}

/// Reduces a g-major [`pair_grid`] to the best result per coupling, earliest Ω on ties.
pub fn best_per_coupling(pairs: &[PairPoint], gs: &[f64]) -> Result<Vec<CouplingPoint>> {
    if gs.is_empty() || pairs.is_empty() || pairs.len() % gs.len() != 0 {
        return Err(invalid("pair grid does not match the coupling list"));
    }
    let best = |rs: &mut dyn Iterator<Item = OptResult>| {
        rs.reduce(|a, b| if b.best_p1 > a.best_p1 { b } else { a }).expect("nonempty")
    };
    Ok(gs
        .iter()
        .zip(pairs.chunks(pairs.len() / gs.len()))
        .map(|(&g, chunk)| CouplingPoint {
            g,
            deterministic: best(&mut chunk.iter().map(|r| r.deterministic)),
            threshold: best(&mut chunk.iter().map(|r| r.threshold)),
        })
        .collect())
}

/// Per coupling, the best deterministic and threshold results over `omegas`.
pub fn sweep_coupling(
    base: &ModelParams,
    gs: &[f64],
    omegas: &[f64],
    cfg: &OptimizationConfig,
) -> Result<Vec<CouplingPoint>> {
    if omegas.is_empty() {
        return Err(invalid("empty pump-rate grid"));
    }
    best_per_coupling(&pair_grid(base, gs, omegas, cfg)?, gs)
}

/// ε at which the optimized deterministic p1 of `params` equals `target`,
/// by bisection in log ε over `[lo, hi]`.
pub fn calibrate_epsilon(
    params: &ModelParams,
    target: f64,
    cfg: &OptimizationConfig,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    if !(lo > 0.0 && hi < 1.0 && lo < hi) {
        return Err(invalid(format!("bad epsilon bracket [{lo}, {hi}]")));
    }
    let curves = p_curves(params, Mode::Deterministic, &cfg.ts_grid, cfg)?;
    // resolve t_ε far below the reporting tolerance so ε is not quantized by it
    let tol = cfg.time_tol.min(1e-10);
    let f = |eps: f64| -> Result<f64> { Ok(choose_stop(&curves, eps, tol)?.stats.p1 - target) };
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let (fa, fb) = (f(lo)?, f(hi)?);
    if fa > 0.0 || fb < 0.0 {
        return Err(Error::Domain(format!(
            "target p1 = {target} not reachable for epsilon in [{lo}, {hi}] (range {:.6}..{:.6})",
            fa + target,
            fb + target
        )));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(m.exp())? < 0.0 {
            a = m;
        } else {
            b = m;
        }
        if b - a < 1e-12 {
            break;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fig3() -> ModelParams {
        ModelParams { omega: 0.1, g: 0.1, gamma_sp: 0.001, ..Default::default() }
    }

    #[test]
    fn grids() {
        let g = step_grid(0.0, 100.0, 0.5).unwrap();
        assert_eq!(g.len(), 201);
        assert_eq!(*g.last().unwrap(), 100.0);
        let l = log_grid(0.1, 10.0, 24).unwrap();
        assert_eq!((l[0], l[23]), (0.1, 10.0));
        assert!(l.windows(2).all(|w| w[1] > w[0]));
        assert!(step_grid(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizationConfig::default().validate().is_err());
        assert!(OptimizationConfig::new(0.01).validate().is_ok());
        let mut c = OptimizationConfig::new(0.01);
        c.ts_grid = vec![1.0, 0.5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn curves_start_in_vacuum_and_p2_grows() {
        let cfg = OptimizationConfig::new(0.01);
        let c = p_curves(&fig3(), Mode::Deterministic, &cfg.ts_grid, &cfg).unwrap();
        assert_abs_diff_eq!(c.p0[0], 1.0, epsilon = 1e-10);
        assert!(c.p2plus.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn t_epsilon_brackets_crossing() {
        let cfg = OptimizationConfig::new(0.01);
        let c = p_curves(&fig3(), Mode::Deterministic, &cfg.ts_grid, &cfg).unwrap();
        let t = find_t_epsilon(&c, 0.01, 1e-4).unwrap().unwrap();
        assert!(c.curve.stats(t - 1e-3).unwrap().p2plus < 0.01);
        assert!(c.curve.stats(t + 1e-3).unwrap().p2plus > 0.01);
        assert_eq!(find_t_epsilon(&c, 0.99, 1e-4).unwrap(), None);
        let small = find_t_epsilon(&c, 1e-9, 1e-4).unwrap().unwrap();
        assert!(small < 0.5);
    }

    #[test]
    fn t_max_interior_and_dominates_grid() {
        let cfg = OptimizationConfig::new(0.01);
        let c = p_curves(&fig3(), Mode::Deterministic, &cfg.ts_grid, &cfg).unwrap();
        let (t, p) = find_t_max(&c, 1e-4).unwrap();
        assert!(t > 0.0 && t < 100.0);
        assert!(p >= c.p1.iter().copied().fold(0.0, f64::max));
        assert!(p > c.p1[0]);
    }

    #[test]
    fn unimodality() {
        assert!(is_unimodal(&[0.0, 1.0, 2.0, 1.0, 0.5]));
        assert!(is_unimodal(&[3.0, 2.0, 1.0]));
        assert!(!is_unimodal(&[0.0, 1.0, 0.5, 1.0]));
    }

    #[test]
    fn golden_section_finds_peak() {
        let f = |t: f64| -> Result<f64> { Ok(-(t - 0.3).powi(2)) };
        let (t, _) = golden_max(&f, 0.0, 1.0, 1e-8).unwrap();
        assert_abs_diff_eq!(t, 0.3, epsilon = 1e-7);
    }

    #[test]
    fn loose_cap_stops_at_maximum() {
        let cfg = OptimizationConfig::new(0.9);
        let r = optimal_deterministic(&fig3(), &cfg).unwrap();
        assert_eq!(r.branch, Branch::InteriorMaximum);
        assert_eq!(r.argmax.t_s, r.t_max);
        let tight = optimal_deterministic(&fig3(), &OptimizationConfig::new(0.005)).unwrap();
        assert_eq!(tight.branch, Branch::EpsilonLimited);
        assert!(tight.p2_at_opt <= 0.005 + 1e-6);
        assert!(tight.best_p1 <= r.best_p1);
    }

    #[test]
    fn calibration_hits_target() {
        let mut cfg = OptimizationConfig::new(0.01);
        cfg.ts_grid = step_grid(0.0, 100.0, 0.5).unwrap();
        let eps = calibrate_epsilon(&fig3(), 0.5, &cfg, 1e-6, 0.5).unwrap();
        let fine = OptimizationConfig { epsilon: eps, time_tol: 1e-10, ..cfg.clone() };
        assert_abs_diff_eq!(optimal_deterministic(&fig3(), &fine).unwrap().best_p1, 0.5, epsilon = 1e-8);
        let coarse = OptimizationConfig { epsilon: eps, ..cfg };
        assert_abs_diff_eq!(optimal_deterministic(&fig3(), &coarse).unwrap().best_p1, 0.5, epsilon = 1e-4);
    }

    #[test]
    fn threshold_result_respects_cap() {
        let mut cfg = OptimizationConfig::new(0.01);
        cfg.gamma_set = vec![10.0];
        cfg.nu1_grid = log_grid(0.5, 4.0, 4).unwrap();
        cfg.workers = Some(2);
        let p = ModelParams { omega: 0.1, g: 0.1, gamma_sp: 1e-4, ..Default::default() };
        let r = optimal_threshold(&p, &cfg).unwrap();
        assert!(r.p2_at_opt <= cfg.epsilon + 1e-6);
        assert_eq!(r.argmax.gamma, Some(10.0));
        let again = optimal_threshold(&p, &OptimizationConfig { workers: Some(1), ..cfg.clone() }).unwrap();
        assert_eq!(r, again);
        let det = optimal_deterministic(&p, &cfg).unwrap();
        let with_det =
            optimal_threshold(&p, &OptimizationConfig { include_open_loop: true, ..cfg }).unwrap();
        assert!(with_det.best_p1 >= det.best_p1);
    }
}
