//! Density states and their evolution under a piecewise-constant generator.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Eig, Eigh, Factorize, LUFactorized, Solve, SVD, UPLO};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::algebra::SpaceDescriptor;
use crate::error::{invalid, Error, Result};
use crate::generator::{Basis, LiouvillianMatrix};

/// Tolerance on trace and Hermiticity of an accepted density matrix.
pub const STATE_TOL: f64 = 1e-10;
/// Most negative eigenvalue tolerated before a state counts as unphysical.
pub const POSITIVITY_TOL: f64 = 1e-10;
/// Eigenvector condition number above which a generator is treated as
/// defective and propagated numerically instead.
pub const DEFECTIVE_COND: f64 = 1e10;
/// Eigenvector condition number above which [`Method::Auto`] steps with RK4
/// rather than trusting the eigen-expansion to ~1e-10.
pub const SPECTRAL_ACCURACY_COND: f64 = 1e6;

/// A density matrix stored row-major as a vector of length N², tagged with the
/// time it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityState {
    vec: Array1<C64>,
    space: SpaceDescriptor,
    time: f64,
}

impl DensityState {
    pub fn basis_state(space: &SpaceDescriptor, digits: &[usize]) -> Result<Self> {
        let n = space.total_dim();
        let i = space.index_of(digits)?;
        let mut vec = Array1::zeros(n * n);
        vec[i * n + i] = C64::from(1.0);
        Ok(Self { vec, space: space.clone(), time: 0.0 })
    }

    /// `|G, 0, 0⟩` with the control switch ON when present.
    pub fn initial(space: &SpaceDescriptor) -> Result<Self> {
        let mut digits = vec![0; space.num_subsystems()];
        if space.has_control() {
            digits[crate::algebra::CONTROL] = 1;
        }
        Self::basis_state(space, &digits)
    }

    pub fn maximally_mixed(space: &SpaceDescriptor) -> Self {
        let n = space.total_dim();
        let mut vec = Array1::zeros(n * n);
        for i in 0..n {
            vec[i * n + i] = C64::from(1.0 / n as f64);
        }
        Self { vec, space: space.clone(), time: 0.0 }
    }

    /// Validated constructor: Hermitian, unit trace and positive semidefinite
    /// within tolerance.
    pub fn from_matrix(m: Array2<C64>, space: &SpaceDescriptor, time: f64) -> Result<Self> {
        let n = space.total_dim();
        if m.dim() != (n, n) {
            return Err(invalid(format!("density matrix must be {n}x{n}, got {:?}", m.dim())));
        }
        let s = Self::from_matrix_unchecked(m, space, time);
        s.check_invariants(STATE_TOL)?;
        Ok(s)
    }

    pub fn from_matrix_unchecked(m: Array2<C64>, space: &SpaceDescriptor, time: f64) -> Self {
        let n = space.total_dim();
        let vec = Array1::from_iter(m.iter().copied());
        debug_assert_eq!(vec.len(), n * n);
        Self { vec, space: space.clone(), time }
    }

    pub fn from_vec_unchecked(vec: Array1<C64>, space: &SpaceDescriptor, time: f64) -> Self {
        debug_assert_eq!(vec.len(), space.total_dim().pow(2));
        Self { vec, space: space.clone(), time }
    }

    pub fn vec(&self) -> &Array1<C64> {
        &self.vec
    }

    pub fn matrix(&self) -> ArrayView2<'_, C64> {
        let n = self.space.total_dim();
        self.vec.view().into_shape_with_order((n, n)).expect("square storage")
    }

    pub fn to_matrix(&self) -> Array2<C64> {
        self.matrix().to_owned()
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn trace(&self) -> C64 {
        self.matrix().diag().sum()
    }

    pub fn population(&self, index: usize) -> f64 {
        let n = self.space.total_dim();
        self.vec[index * n + index].re
    }

    pub fn hermiticity_error(&self) -> f64 {
        let m = self.matrix();
        let n = m.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((m[[i, j]] - m[[j, i]].conj()).norm());
            }
        }
        worst
    }

    fn hermitian_part(&self) -> Array2<C64> {
        let m = self.matrix();
        (&m + &m.t().mapv(|z| z.conj())).mapv(|z| z * 0.5)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let (vals, _) = self.hermitian_part().eigh(UPLO::Lower)?;
        Ok(vals.iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let tr = self.trace();
        if (tr - C64::from(1.0)).norm() > tol {
            return Err(Error::Positivity(format!("trace {tr} differs from 1")));
        }
        let herm = self.hermiticity_error();
        if herm > tol {
            return Err(Error::Positivity(format!("not Hermitian (deviation {herm:e})")));
        }
        let min = self.min_eigenvalue()?;
        if min < -POSITIVITY_TOL.max(tol) {
            return Err(Error::Positivity(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// `½ ‖ρ − σ‖₁`.
    pub fn trace_distance(&self, other: &DensityState) -> Result<f64> {
        if self.space != other.space {
            return Err(invalid("states live on different spaces"));
        }
        let d = Self::from_vec_unchecked(&self.vec - &other.vec, &self.space, self.time);
        let (vals, _) = d.hermitian_part().eigh(UPLO::Lower)?;
        Ok(0.5 * vals.iter().map(|v| v.abs()).sum::<f64>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rk4Options {
    /// Initial step; halved on trace drift.
    pub dt: f64,
    pub max_halvings: u32,
    /// Allowed drift of Tr ρ over the run.
    pub trace_tol: f64,
}

impl Default for Rk4Options {
    fn default() -> Self {
        Self { dt: 1e-3, max_halvings: 4, trace_tol: 1e-6 }
    }
}

struct SparseRows {
    rows: Vec<Vec<(usize, C64)>>,
}

impl SparseRows {
    fn new(m: &Array2<C64>) -> Self {
        let rows = m
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, z)| z.norm() != 0.0)
                    .map(|(j, z)| (j, *z))
                    .collect()
            })
            .collect();
        Self { rows }
    }

    fn apply(&self, x: &Array1<C64>, out: &mut Array1<C64>) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(j, a)| a * x[j]).sum();
        }
    }
}

struct Rk4Stepper {
    op: SparseRows,
    k: [Array1<C64>; 4],
    tmp: Array1<C64>,
}

impl Rk4Stepper {
    fn new(gen: &LiouvillianMatrix) -> Self {
        let m = gen.dim();
        let z = || Array1::zeros(m);
        Self { op: SparseRows::new(gen.matrix()), k: [z(), z(), z(), z()], tmp: z() }
    }

    fn step(&mut self, x: &mut Array1<C64>, h: f64) {
        let [k1, k2, k3, k4] = &mut self.k;
        self.op.apply(x, k1);
        self.tmp.assign(x);
        self.tmp.scaled_add(C64::from(0.5 * h), k1);
        self.op.apply(&self.tmp, k2);
        self.tmp.assign(x);
        self.tmp.scaled_add(C64::from(0.5 * h), k2);
        self.op.apply(&self.tmp, k3);
        self.tmp.assign(x);
        self.tmp.scaled_add(C64::from(h), k3);
        self.op.apply(&self.tmp, k4);
        let w = h / 6.0;
        x.zip_mut_with(&*k1, |a, b| *a += b * w);
        x.zip_mut_with(&*k2, |a, b| *a += b * (2.0 * w));
        x.zip_mut_with(&*k3, |a, b| *a += b * (2.0 * w));
        x.zip_mut_with(&*k4, |a, b| *a += b * w);
    }
}

/// Coordinates at each of `times` (non-decreasing, `times[0] ≥ 0` measured
/// from the initial coordinates) using fixed-step RK4.
pub fn rk4_coords(
    gen: &LiouvillianMatrix,
    x0: &Array1<C64>,
    times: &[f64],
    opts: Rk4Options,
) -> Result<Vec<Array1<C64>>> {
    if !(opts.dt.is_finite() && opts.dt > 0.0) {
        return Err(invalid(format!("RK4 step must be positive, got {}", opts.dt)));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("output times must be finite, non-negative and sorted"));
    }
    let norm = gen.norm_inf();
    if opts.dt > 0.5 / norm.max(f64::MIN_POSITIVE) {
        warn!("RK4 step {} exceeds 0.5/‖L‖∞ = {:.3e}; integration may be unstable", opts.dt, 0.5 / norm);
    }
    let tr = gen.basis().trace_functional();
    let trace = |x: &Array1<C64>| x.iter().zip(&tr).map(|(a, b)| a * b).sum::<C64>();
    let tr0 = trace(x0);
    let bound = x0.iter().map(|z| z.norm()).fold(tr0.norm(), f64::max);
    let mut stepper = Rk4Stepper::new(gen);
    let mut dt = opts.dt;
    for _ in 0..=opts.max_halvings {
        let mut x = x0.clone();
        let mut t = 0.0;
        let mut out = Vec::with_capacity(times.len());
        let mut drift = 0.0f64;
        for &target in times {
            let span = target - t;
            if span > 0.0 {
                let steps = (span / dt).ceil().max(1.0) as usize;
                let h = span / steps as f64;
                for _ in 0..steps {
                    stepper.step(&mut x, h);
                }
                t = target;
            }
            // a valid density matrix has no entry larger than its trace
            let growth = x.iter().map(|z| z.norm()).fold(0.0, f64::max) - bound;
            let d = (trace(&x) - tr0).norm().max(growth);
            if !d.is_finite() || d > opts.trace_tol || x.iter().any(|z| !z.is_finite()) {
                drift = d;
                break;
            }
            out.push(x.clone());
        }
        if out.len() == times.len() {
            return Ok(out);
        }
        warn!("RK4 trace drift or growth {drift:e} at dt = {dt}; halving the step");
        dt *= 0.5;
    }
    Err(Error::Integration { message: "trace drift or norm growth persisted after step halving".into(), dt })
}

pub fn rk4_evolve(
    gen: &LiouvillianMatrix,
    rho: &DensityState,
    t: f64,
    opts: Rk4Options,
) -> Result<DensityState> {
    let x0 = gen.basis().coords_of(rho)?;
    let x = rk4_coords(gen, &x0, &[t], opts)?.pop().expect("one output");
    Ok(gen.basis().state_from_coords(&x, rho.time() + t))
}

pub fn rk4_trajectory(
    gen: &LiouvillianMatrix,
    rho: &DensityState,
    times: &[f64],
    opts: Rk4Options,
) -> Result<Vec<DensityState>> {
    let x0 = gen.basis().coords_of(rho)?;
    let xs = rk4_coords(gen, &x0, times, opts)?;
    Ok(xs
        .iter()
        .zip(times)
        .map(|(x, &t)| gen.basis().state_from_coords(x, rho.time() + t))
        .collect())
}

/// Eigendecomposition `L = V diag(λ) V⁻¹` of a generator.
pub struct SpectralDecomposition {
    eigenvalues: Array1<C64>,
    vectors: Array2<C64>,
    lu: LUFactorized<ndarray::OwnedRepr<C64>>,
    condition: f64,
    /// The single mode carrying the trace, with the trace functional.
    trace_mode: Option<(usize, Array1<C64>)>,
}

impl SpectralDecomposition {
    pub fn new(gen: &LiouvillianMatrix) -> Result<Self> {
        let (eigenvalues, mut vectors) = gen.matrix().eig()?;
        let trace_mode = if gen.trace_preservation_error() <= 1e-12 * gen.norm_inf().max(1.0) {
            make_modes_traceless(gen, &eigenvalues, &mut vectors).map(|k| (k, gen.basis().trace_functional()))
        } else {
            None
        };
        let (_, s, _) = vectors.svd(false, false)?;
        let smax = s.iter().copied().fold(0.0, f64::max);
        let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        let lu = vectors.factorize()?;
        Ok(Self { eigenvalues, vectors, lu, condition, trace_mode })
    }

    pub fn eigenvalues(&self) -> &Array1<C64> {
        &self.eigenvalues
    }

    pub fn vectors(&self) -> &Array2<C64> {
        &self.vectors
    }

    /// 2-norm condition number of the eigenvector matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn defective_suspect(&self) -> bool {
        !(self.condition <= DEFECTIVE_COND)
    }

    pub fn spectral_abscissa(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Modal amplitudes `V⁻¹ x`.
    pub fn expand(&self, x: &Array1<C64>) -> Result<Array1<C64>> {
        let mut c = self.lu.solve(x)?;
        // all other modes are traceless, so this amplitude is Tr x exactly
        if let Some((k, w)) = &self.trace_mode {
            c[*k] = w.dot(x);
        }
        Ok(c)
    }

    pub fn evolve_coords(&self, x: &Array1<C64>, t: f64) -> Result<Array1<C64>> {
        let c = self.expand(x)?;
        let scaled: Array1<C64> =
            c.iter().zip(&self.eigenvalues).map(|(c, l)| c * (l * t).exp()).collect();
        Ok(self.vectors.dot(&scaled))
    }
}

/// For a trace-preserving generator `Tr(L v) = 0`, so every eigenvector with
/// `λ ≠ 0` is exactly traceless. Rounding in near-defective bases breaks this
/// by up to ε·cond(V); shifting each such mode by a kernel vector restores it
/// without touching the eigenvalue relation beyond rounding. The kernel is
/// rearranged the same way around one unit-trace vector, whose column index
/// is returned.
fn make_modes_traceless(gen: &LiouvillianMatrix, eigenvalues: &Array1<C64>, vectors: &mut Array2<C64>) -> Option<usize> {
    let w = gen.basis().trace_functional();
    let tol = 1e-9 * gen.norm_inf().max(1.0);
    let kernel: Vec<usize> = (0..eigenvalues.len()).filter(|&k| eigenvalues[k].norm() <= tol).collect();
    if kernel.is_empty() {
        return None;
    }
    // u = K a with Tr(u) = 1, a ∝ conj(Tr K)
    let traces: Vec<C64> = kernel.iter().map(|&k| w.dot(&vectors.column(k))).collect();
    let norm: f64 = traces.iter().map(|z| z.norm_sqr()).sum();
    if norm < 1e-12 {
        return None;
    }
    let mut u = Array1::<C64>::zeros(w.len());
    for (&k, tr) in kernel.iter().zip(&traces) {
        u.scaled_add(tr.conj() / norm, &vectors.column(k));
    }
    // the kernel column with the largest trace share makes way for u
    let (pos, _) = traces.iter().enumerate().fold((0, 0.0), |best, (i, z)| if z.norm() > best.1 { (i, z.norm()) } else { best });
    let slot = kernel[pos];
    vectors.column_mut(slot).assign(&u);
    for k in 0..eigenvalues.len() {
        if k == slot {
            continue;
        }
        let tr = w.dot(&vectors.column(k));
        let mut col = vectors.column_mut(k);
        col.scaled_add(-tr, &u);
    }
    Some(slot)
}

/// `ρ(t) = e^{Lt} ρ` by eigendecomposition; refuses defective-looking
/// generators.
pub fn spectral_evolve(gen: &LiouvillianMatrix, rho: &DensityState, t: f64) -> Result<DensityState> {
    let sd = SpectralDecomposition::new(gen)?;
    if sd.defective_suspect() {
        return Err(Error::Numeric(format!(
            "generator looks defective (eigenvector condition {:.3e})",
            sd.condition()
        )));
    }
    let x = sd.evolve_coords(&gen.basis().coords_of(rho)?, t)?;
    Ok(gen.basis().state_from_coords(&x, rho.time() + t))
}

/// Projector onto the kernel of a generator along its range,
/// `P = R (WᴴR)⁻¹ Wᴴ`, with R and W right and left null vectors.
///
/// For a generator whose nonzero spectrum lies strictly in the left half
/// plane, `P x` is the `t → ∞` limit of `e^{Lt} x`.
#[derive(Clone, Debug)]
pub struct KernelProjector {
    matrix: Array2<C64>,
    rank: usize,
    gap: f64,
}

impl KernelProjector {
    pub fn new(gen: &LiouvillianMatrix) -> Result<Self> {
        let l = gen.matrix();
        let tol = 1e-9 * gen.norm_inf().max(1.0);
        let (lr, vr) = l.eig()?;
        let lh = l.t().mapv(|z| z.conj());
        let (ll, vl) = lh.eig()?;
        let pick = |vals: &Array1<C64>| -> Vec<usize> {
            vals.iter().enumerate().filter(|(_, z)| z.norm() <= tol).map(|(i, _)| i).collect()
        };
        let (ir, il) = (pick(&lr), pick(&ll));
        if ir.len() != il.len() || ir.is_empty() {
            return Err(Error::Numeric(format!(
                "kernel dimension mismatch: {} right vs {} left null vectors",
                ir.len(),
                il.len()
            )));
        }
        let gap = lr
            .iter()
            .filter(|z| z.norm() > tol)
            .map(|z| -z.re)
            .fold(f64::INFINITY, f64::min);
        if gap <= 0.0 {
            return Err(Error::Numeric(format!(
                "generator has non-decaying modes outside its kernel (gap {gap:e})"
            )));
        }
        let r = vr.select(Axis(1), &ir);
        let w = vl.select(Axis(1), &il);
        let wh = w.t().mapv(|z| z.conj());
        let gram = wh.dot(&r);
        let coef = gram.factorize()?.solve_into_matrix(wh)?;
        Ok(Self { matrix: r.dot(&coef), rank: ir.len(), gap })
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Slowest decay rate of the non-stationary modes.
    pub fn gap(&self) -> f64 {
        self.gap
    }

    pub fn apply(&self, x: &Array1<C64>) -> Array1<C64> {
        self.matrix.dot(x)
    }
}

trait SolveColumns {
    fn solve_into_matrix(&self, b: Array2<C64>) -> Result<Array2<C64>>;
}

impl SolveColumns for LUFactorized<ndarray::OwnedRepr<C64>> {
    fn solve_into_matrix(&self, b: Array2<C64>) -> Result<Array2<C64>> {
        let mut out = Array2::zeros(b.dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve(&col.to_owned())?);
        }
        Ok(out)
    }
}

/// `lim_{t→∞} e^{L t} ρ` for a generator with a stable nonzero spectrum.
pub fn asymptotic_state(gen: &LiouvillianMatrix, rho: &DensityState) -> Result<DensityState> {
    let p = KernelProjector::new(gen)?;
    let x = p.apply(&gen.basis().coords_of(rho)?);
    Ok(gen.basis().state_from_coords(&x, f64::INFINITY))
}

/// [`asymptotic_state`] followed by a stationarity residual check and the
/// density-matrix invariants.
pub fn asymptotic_state_checked(gen: &LiouvillianMatrix, rho: &DensityState) -> Result<DensityState> {
    let out = asymptotic_state(gen, rho)?;
    let x = gen.basis().coords_of(&out)?;
    let residual = gen.matrix().dot(&x).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if residual > 1e-8 * gen.norm_inf().max(1.0) {
        return Err(Error::Numeric(format!("asymptotic state is not stationary ({residual:e})")));
    }
    out.check_invariants(1e-8)?;
    Ok(out)
}

/// One switch from the pumping-on to the pumping-off generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchPlan {
    /// Time at which pumping is forced off.
    pub t_switch: f64,
}

impl SwitchPlan {
    pub fn new(t_switch: f64) -> Result<Self> {
        if !(t_switch.is_finite() && t_switch >= 0.0) {
            return Err(invalid(format!("switch time must be finite and non-negative, got {t_switch}")));
        }
        Ok(Self { t_switch })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Eigendecomposition when it is well conditioned, RK4 otherwise.
    #[default]
    Auto,
    Spectral,
    Rk4,
}

/// `Σ_j a_j e^{λ_j t}`, the time dependence of a linear functional of the
/// state under a diagonalizable generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalSeries {
    pub amplitudes: Vec<C64>,
    pub rates: Vec<C64>,
}

impl ModalSeries {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitudes
            .iter()
            .zip(&self.rates)
            .map(|(a, l)| a * (l * t).exp())
            .sum::<C64>()
            .re
    }

    /// Drops terms whose amplitude is below `tol`.
    pub fn pruned(mut self, tol: f64) -> Self {
        let keep: Vec<bool> = self.amplitudes.iter().map(|a| a.norm() > tol).collect();
        let mut k = keep.iter();
        self.amplitudes.retain(|_| *k.next().expect("same length"));
        let mut k = keep.iter();
        self.rates.retain(|_| *k.next().expect("same length"));
        self
    }
}

/// Fixed-step RK4 for a linear generator in matrix form: one step is the
/// polynomial `R(hL) = I + hL + (hL)²/2 + (hL)³/6 + (hL)⁴/24`, and long spans
/// apply its powers by repeated squaring.
pub struct Rk4Propagator {
    generator: Array2<C64>,
    dt: f64,
    cache: Mutex<HashMap<u64, Arc<Array2<C64>>>>,
}

const PROPAGATOR_CACHE: usize = 64;

impl Rk4Propagator {
    pub fn new(gen: &LiouvillianMatrix, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid(format!("RK4 step must be positive, got {dt}")));
        }
        let norm = gen.norm_inf();
        if dt > 0.5 / norm.max(f64::MIN_POSITIVE) {
            warn!("RK4 step {dt} exceeds 0.5/‖L‖∞ = {:.3e}; integration may be unstable", 0.5 / norm);
        }
        Ok(Self { generator: gen.matrix().clone(), dt, cache: Mutex::new(HashMap::new()) })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn step_matrix(&self, h: f64) -> Array2<C64> {
        let n = self.generator.nrows();
        let a = self.generator.mapv(|z| z * h);
        let eye = Array2::<C64>::eye(n);
        let mut m = &eye + &a.mapv(|z| z / 4.0);
        for k in [3.0, 2.0, 1.0] {
            m = &eye + &a.dot(&m).mapv(|z| z / k);
        }
        m
    }

    /// Propagator over `span`, taken in `ceil(span/dt)` equal steps.
    pub fn span_matrix(&self, span: f64) -> Result<Arc<Array2<C64>>> {
        if !(span.is_finite() && span >= 0.0) {
            return Err(invalid(format!("propagation span must be non-negative, got {span}")));
        }
        let key = span.to_bits();
        if let Some(m) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let n = self.generator.nrows();
        let steps = ((span / self.dt) - 1e-9).ceil().max(1.0) as u64;
        let mut base = self.step_matrix(span / steps as f64);
        let mut acc = Array2::<C64>::eye(n);
        let mut e = steps;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.dot(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.dot(&base);
            }
        }
        let acc = Arc::new(acc);
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() < PROPAGATOR_CACHE {
            cache.insert(key, acc.clone());
        }
        Ok(acc)
    }

    pub fn advance(&self, x: &Array1<C64>, span: f64) -> Result<Array1<C64>> {
        if span == 0.0 {
            return Ok(x.clone());
        }
        Ok(self.span_matrix(span)?.dot(x))
    }
}

enum Pumping {
    Spectral(SpectralDecomposition),
    Stepped(Rk4Propagator),
}

/// Pump for a time `T_s`, then relax to the asymptote with pumping off.
///
/// The pumping-on generator is diagonalized once so asymptotic functionals can
/// be evaluated for any `T_s`. Generators whose eigenvectors are too poorly
/// conditioned for that are stepped with RK4 instead.
pub struct TwoPhaseSolver {
    on: LiouvillianMatrix,
    off: LiouvillianMatrix,
    x0: Array1<C64>,
    initial: DensityState,
    projector: KernelProjector,
    pumping: Pumping,
    condition: f64,
    rk4: Rk4Options,
}

impl TwoPhaseSolver {
    pub fn new(
        on: LiouvillianMatrix,
        off: LiouvillianMatrix,
        initial: &DensityState,
        method: Method,
        rk4: Rk4Options,
    ) -> Result<Self> {
        let projector = KernelProjector::new(&off)?;
        Self::with_projector(on, off, projector, initial, method, rk4)
    }

    /// As [`TwoPhaseSolver::new`] with the kernel projector of `off` supplied,
    /// so sweeps that share a pumping-off generator compute it once.
    pub fn with_projector(
        on: LiouvillianMatrix,
        off: LiouvillianMatrix,
        projector: KernelProjector,
        initial: &DensityState,
        method: Method,
        rk4: Rk4Options,
    ) -> Result<Self> {
        if on.dim() != off.dim() || on.space() != off.space() || projector.matrix().nrows() != off.dim() {
            return Err(invalid("pumping-on and pumping-off generators have different bases"));
        }
        let x0 = on.basis().coords_of(initial)?;
        let stepped = || -> Result<Pumping> { Ok(Pumping::Stepped(Rk4Propagator::new(&on, rk4.dt)?)) };
        let (pumping, condition) = match method {
            Method::Rk4 => (stepped()?, f64::NAN),
            Method::Spectral | Method::Auto => {
                let sd = SpectralDecomposition::new(&on)?;
                let cond = sd.condition();
                if method == Method::Spectral {
                    if sd.defective_suspect() {
                        return Err(Error::Numeric(format!(
                            "pumping-on generator looks defective (condition {cond:.3e})"
                        )));
                    }
                    (Pumping::Spectral(sd), cond)
                } else if cond > SPECTRAL_ACCURACY_COND {
                    debug!("eigenvector condition {cond:.3e}; stepping with RK4");
                    (stepped()?, cond)
                } else {
                    (Pumping::Spectral(sd), cond)
                }
            }
        };
        Ok(Self { on, off, x0, initial: initial.clone(), projector, pumping, condition, rk4 })
    }

    pub fn on(&self) -> &LiouvillianMatrix {
        &self.on
    }

    pub fn off(&self) -> &LiouvillianMatrix {
        &self.off
    }

    pub fn basis(&self) -> &Basis {
        self.on.basis()
    }

    pub fn is_spectral(&self) -> bool {
        matches!(self.pumping, Pumping::Spectral(_))
    }

    /// Eigenvector condition number of the pumping-on generator (NaN when it
    /// was never diagonalized).
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn projector(&self) -> &KernelProjector {
        &self.projector
    }

    pub fn initial_coords(&self) -> &Array1<C64> {
        &self.x0
    }

    /// Time dependence in `T_s` of `f · P e^{L_on T_s} x₀`, when diagonalized.
    pub fn asymptotic_series(&self, functional: &Array1<C64>) -> Result<Option<ModalSeries>> {
        let Pumping::Spectral(sd) = &self.pumping else { return Ok(None) };
        let c = sd.expand(&self.x0)?;
        let weights = functional.dot(&self.projector.matrix().dot(sd.vectors()));
        let amplitudes = weights.iter().zip(&c).map(|(w, c)| w * c).collect();
        Ok(Some(ModalSeries { amplitudes, rates: sd.eigenvalues().to_vec() }))
    }

    /// Coordinates after pumping for `span`, starting from `x`.
    pub fn advance_pumped(&self, x: &Array1<C64>, span: f64) -> Result<Array1<C64>> {
        match &self.pumping {
            Pumping::Spectral(sd) => sd.evolve_coords(x, span),
            Pumping::Stepped(p) => p.advance(x, span),
        }
    }

    /// Coordinates after pumping from the initial state for each time.
    pub fn pumped_coords(&self, times: &[f64]) -> Result<Vec<Array1<C64>>> {
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(invalid("pumping times must be finite and non-negative"));
        }
        match &self.pumping {
            Pumping::Spectral(sd) => times
                .iter()
                .map(|&t| if t == 0.0 { Ok(self.x0.clone()) } else { sd.evolve_coords(&self.x0, t) })
                .collect(),
            Pumping::Stepped(p) => {
                let mut order: Vec<usize> = (0..times.len()).collect();
                order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
                let mut out = vec![Array1::zeros(0); times.len()];
                let (mut t, mut x) = (0.0, self.x0.clone());
                for i in order {
                    x = p.advance(&x, times[i] - t)?;
                    t = times[i];
                    out[i] = x.clone();
                }
                Ok(out)
            }
        }
    }

    /// Asymptotic coordinates once pumping stops in the state `x`.
    pub fn relax(&self, x: &Array1<C64>) -> Array1<C64> {
        self.projector.apply(x)
    }

    /// Asymptotic coordinates for each switch time.
    pub fn asymptotic_coords(&self, t_switch: &[f64]) -> Result<Vec<Array1<C64>>> {
        Ok(self.pumped_coords(t_switch)?.iter().map(|x| self.relax(x)).collect())
    }

    pub fn asymptotic_state(&self, plan: SwitchPlan) -> Result<DensityState> {
        let x = self.asymptotic_coords(&[plan.t_switch])?.pop().expect("one output");
        Ok(self.basis().state_from_coords(&x, f64::INFINITY))
    }

    /// States at `times` for a single switch at `plan.t_switch`. The phase
    /// after the switch is integrated with RK4.
    pub fn trajectory(&self, plan: SwitchPlan, times: &[f64]) -> Result<Vec<DensityState>> {
        if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|t| !(*t >= 0.0)) {
            return Err(invalid("output times must be non-negative and sorted"));
        }
        let ts = plan.t_switch;
        let split = times.partition_point(|&t| t <= ts);
        let (before, after) = times.split_at(split);
        let basis = self.basis();
        let mut out = Vec::with_capacity(times.len());
        let mut with_switch = before.to_vec();
        with_switch.push(ts);
        let xs = match &self.pumping {
            Pumping::Spectral(_) => self.pumped_coords(&with_switch)?,
            Pumping::Stepped(_) => rk4_coords(&self.on, &self.x0, &with_switch, self.rk4)?,
        };
        let t0 = self.initial.time();
        for (x, &t) in xs.iter().zip(before) {
            out.push(basis.state_from_coords(x, t0 + t));
        }
        let x_switch = xs.last().expect("switch sample");
        if !after.is_empty() {
            let rel: Vec<f64> = after.iter().map(|t| t - ts).collect();
            for (x, &t) in rk4_coords(&self.off, x_switch, &rel, self.rk4)?.iter().zip(after) {
                out.push(basis.state_from_coords(x, t0 + t));
            }
        }
        Ok(out)
    }
}

/// State at the switch and the asymptotic state after pumping is forced off
/// at `plan.t_switch`.
pub fn two_phase_evolve(
    on: &LiouvillianMatrix,
    off: &LiouvillianMatrix,
    rho: &DensityState,
    plan: SwitchPlan,
    method: Method,
) -> Result<(DensityState, DensityState)> {
    let solver = TwoPhaseSolver::new(on.clone(), off.clone(), rho, method, Rk4Options::default())?;
    let at_switch = solver.trajectory(plan, &[plan.t_switch])?.pop().expect("one sample");
    Ok((at_switch, solver.asymptotic_state(plan)?))
}

/// Compares the kernel projection with plain RK4 run for `50/gap` (capped at
/// `t_cap`), returning the projected state and the trace distance between the
/// two routes.
pub fn asymptotic_state_cross_checked(
    gen: &LiouvillianMatrix,
    rho: &DensityState,
    rk4: Rk4Options,
    t_cap: f64,
) -> Result<(DensityState, f64)> {
    let p = KernelProjector::new(gen)?;
    let x0 = gen.basis().coords_of(rho)?;
    let projected = gen.basis().state_from_coords(&p.apply(&x0), f64::INFINITY);
    let t_end = (50.0 / p.gap()).min(t_cap);
    let x = rk4_coords(gen, &x0, &[t_end], rk4)?.pop().expect("one output");
    let integrated = gen.basis().state_from_coords(&x, f64::INFINITY);
    let distance = projected.trace_distance(&integrated)?;
    Ok((projected, distance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{ladder, make_space, Operator};
    use crate::generator::{
        build_deterministic, dissipator, GeneratorTerms, ModelKind, ModelParams, Phase,
    };
    use approx::assert_abs_diff_eq;

    fn decay_generator(rate: f64) -> (LiouvillianMatrix, SpaceDescriptor) {
        let s = make_space(&[2]).unwrap();
        let sm = Operator::from_matrix(ladder(2).unwrap().0, &s).unwrap();
        let m = dissipator(&sm).unwrap().mapv(|z| z * rate);
        (LiouvillianMatrix::new(m, Phase::PumpingOff, Basis::Full(s.clone())).unwrap(), s)
    }

    #[test]
    fn state_validation() {
        let s = make_space(&[2]).unwrap();
        let bad_trace = Array2::from_diag(&ndarray::array![C64::from(0.7), C64::from(0.7)]);
        assert!(DensityState::from_matrix(bad_trace, &s, 0.0).is_err());
        let negative = Array2::from_diag(&ndarray::array![C64::from(1.2), C64::from(-0.2)]);
        assert!(matches!(
            DensityState::from_matrix(negative, &s, 0.0),
            Err(Error::Positivity(_))
        ));
        let mut nonherm = Array2::from_diag(&ndarray::array![C64::from(0.5), C64::from(0.5)]);
        nonherm[[0, 1]] = C64::from(0.1);
        assert!(DensityState::from_matrix(nonherm, &s, 0.0).is_err());
        assert!(DensityState::from_matrix(Array2::eye(3), &s, 0.0).is_err());
    }

    #[test]
    fn initial_state_is_ground_with_control_on() {
        let s = SpaceDescriptor::feedback();
        let rho = DensityState::initial(&s).unwrap();
        assert_eq!(rho.population(s.index_of(&[0, 0, 0, 1]).unwrap()), 1.0);
        assert!(rho.check_invariants(1e-14).is_ok());
    }

    #[test]
    fn trace_distance_of_orthogonal_states() {
        let s = make_space(&[3]).unwrap();
        let a = DensityState::basis_state(&s, &[0]).unwrap();
        let b = DensityState::basis_state(&s, &[2]).unwrap();
        assert_abs_diff_eq!(a.trace_distance(&b).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.trace_distance(&a).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn exponential_decay_rk4_and_spectral() {
        let (gen, s) = decay_generator(0.7);
        let rho = DensityState::basis_state(&s, &[1]).unwrap();
        let want = (-0.7f64 * 2.0).exp();
        let a = rk4_evolve(&gen, &rho, 2.0, Rk4Options { dt: 0.01, ..Default::default() }).unwrap();
        assert_abs_diff_eq!(a.population(1), want, epsilon = 1e-9);
        assert_eq!(a.time(), 2.0);
        let b = spectral_evolve(&gen, &rho, 2.0).unwrap();
        assert_abs_diff_eq!(b.population(1), want, epsilon = 1e-12);
    }

    #[test]
    fn rk4_trajectory_samples() {
        let (gen, s) = decay_generator(1.0);
        let rho = DensityState::basis_state(&s, &[1]).unwrap();
        let ts = [0.0, 0.5, 1.0, 3.0];
        let traj = rk4_trajectory(&gen, &rho, &ts, Rk4Options::default()).unwrap();
        for (st, t) in traj.iter().zip(ts) {
            assert_abs_diff_eq!(st.population(1), (-t).exp(), epsilon = 1e-9);
        }
        assert!(rk4_trajectory(&gen, &rho, &[1.0, 0.5], Rk4Options::default()).is_err());
    }

    #[test]
    fn rk4_unstable_step_fails() {
        let (gen, s) = decay_generator(100.0);
        let rho = DensityState::basis_state(&s, &[1]).unwrap();
        let opts = Rk4Options { dt: 1.0, max_halvings: 2, trace_tol: 1e-6 };
        assert!(matches!(rk4_evolve(&gen, &rho, 50.0, opts), Err(Error::Integration { .. })));
    }

    #[test]
    fn kernel_projector_of_decay() {
        let (gen, s) = decay_generator(0.3);
        let p = KernelProjector::new(&gen).unwrap();
        assert_eq!(p.rank(), 1);
        assert_abs_diff_eq!(p.gap(), 0.15, epsilon = 1e-12);
        let rho = DensityState::basis_state(&s, &[1]).unwrap();
        let inf = asymptotic_state_checked(&gen, &rho).unwrap();
        assert_abs_diff_eq!(inf.population(0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn projector_is_idempotent_on_model() {
        let space = SpaceDescriptor::deterministic();
        let p = ModelParams { omega: 0.1, g: 0.1, gamma_sp: 0.001, ..Default::default() };
        let off = build_deterministic(&p, Phase::PumpingOff, &space).unwrap();
        let rho = DensityState::basis_state(&space, &[1, 1, 0]).unwrap();
        let inf = asymptotic_state_checked(&off, &rho).unwrap();
        let twice = asymptotic_state(&off, &inf).unwrap();
        assert!(inf.trace_distance(&twice).unwrap() < 1e-10);
        let fast = ModelParams { gamma_sp: 0.05, ..p };
        let terms = GeneratorTerms::new(ModelKind::Deterministic, &space).unwrap().populations().unwrap();
        let off = terms.assemble(&fast, Phase::PumpingOff, Default::default()).unwrap();
        let opts = Rk4Options { dt: 0.05, ..Default::default() };
        let (_, d) = asymptotic_state_cross_checked(&off, &rho, opts, 1e4).unwrap();
        assert!(d < 1e-6, "{d:e}");
    }

    #[test]
    fn two_phase_spectral_matches_rk4() {
        let space = SpaceDescriptor::deterministic();
        let p = ModelParams { omega: 0.1, g: 0.1, gamma_sp: 0.001, ..Default::default() };
        let terms = GeneratorTerms::new(ModelKind::Deterministic, &space).unwrap().populations().unwrap();
        let opts = Default::default();
        let on = terms.assemble(&p, Phase::PumpingOn, opts).unwrap();
        let off = terms.assemble(&p, Phase::PumpingOff, opts).unwrap();
        let rho = DensityState::initial(&space).unwrap();
        let plan = SwitchPlan::new(12.0).unwrap();
        let (sa, a) = two_phase_evolve(&on, &off, &rho, plan, Method::Spectral).unwrap();
        let (sb, b) = two_phase_evolve(&on, &off, &rho, plan, Method::Rk4).unwrap();
        assert!(sa.trace_distance(&sb).unwrap() < 1e-8);
        assert_eq!(sa.time(), 12.0);
        assert!(a.trace_distance(&b).unwrap() < 1e-8);
        assert!(a.check_invariants(1e-9).is_ok());
    }

    #[test]
    fn modal_series_matches_projection() {
        let space = SpaceDescriptor::deterministic();
        let p = ModelParams { omega: 0.05, g: 0.2, gamma_sp: 0.001, ..Default::default() };
        let terms = GeneratorTerms::new(ModelKind::Deterministic, &space).unwrap().populations().unwrap();
        let opts = Default::default();
        let solver = TwoPhaseSolver::new(
            terms.assemble(&p, Phase::PumpingOn, opts).unwrap(),
            terms.assemble(&p, Phase::PumpingOff, opts).unwrap(),
            &DensityState::initial(&space).unwrap(),
            Method::Auto,
            Rk4Options::default(),
        )
        .unwrap();
        let f = solver.basis().population_functional(|d| d[2] == 1);
        let series = solver.asymptotic_series(&f).unwrap().unwrap();
        for t in [0.0, 3.0, 17.5] {
            let x = solver.asymptotic_coords(&[t]).unwrap().pop().unwrap();
            assert_abs_diff_eq!(series.eval(t), f.dot(&x).re, epsilon = 1e-10);
        }
    }

    #[test]
    fn trajectory_crosses_switch() {
        let space = SpaceDescriptor::deterministic();
        let p = ModelParams::default();
        let terms = GeneratorTerms::new(ModelKind::Deterministic, &space).unwrap().populations().unwrap();
        let opts = Default::default();
        let solver = TwoPhaseSolver::new(
            terms.assemble(&p, Phase::PumpingOn, opts).unwrap(),
            terms.assemble(&p, Phase::PumpingOff, opts).unwrap(),
            &DensityState::initial(&space).unwrap(),
            Method::Auto,
            Rk4Options::default(),
        )
        .unwrap();
        let traj = solver.trajectory(SwitchPlan::new(5.0).unwrap(), &[0.0, 2.0, 5.0, 7.0, 400.0]).unwrap();
        assert_eq!(traj.len(), 5);
        let inf = solver.asymptotic_state(SwitchPlan::new(5.0).unwrap()).unwrap();
        assert!(traj[4].trace_distance(&inf).unwrap() < 1e-4);
        for st in &traj {
            assert!(st.check_invariants(1e-8).is_ok());
        }
    }
}
