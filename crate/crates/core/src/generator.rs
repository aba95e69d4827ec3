//! GKSL generators of the pumped dot–cavity–bath model, with and without the
//! threshold-feedback control switch.
//!
//! Density matrices are vectorized row-major, `vec(ρ)[i·N + j] = ρ[i, j]`, so
//! `vec(A ρ B) = (A ⊗ Bᵀ) vec(ρ)`.

use std::collections::HashMap;
use std::sync::Arc;

use log::warn;
use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::algebra::{ModelOperators, Operator, SpaceDescriptor, BATH, CAVITY, CONTROL, DOT};
use crate::error::{invalid, Error, Result};
use crate::DensityState;

const HERMITIAN_TOL: f64 = 1e-12;

/// Physical rates in units of the cavity leakage rate κ, plus the constants of
/// the continuous measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Pump rate Ω.
    pub omega: f64,
    /// Dot–cavity coupling g.
    pub g: f64,
    /// Spontaneous emission into unwanted modes, Γ.
    pub gamma_sp: f64,
    /// Measurement (dephasing) rate γ.
    pub gamma_meas: f64,
    /// Cavity-to-bath leakage κ.
    pub kappa: f64,
    /// Switch-off rate with the dot excited.
    pub nu1: f64,
    /// Switch-off rate with the dot in its ground state.
    pub nu0: f64,
    /// Measurement efficiency η.
    pub eta: f64,
    /// Averaging window Δt of the measurement current.
    pub dt_window: f64,
    /// Threshold τ on the window-integrated current; `None` when switching is
    /// disabled.
    pub tau: Option<f64>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            omega: 0.1,
            g: 0.1,
            gamma_sp: 0.001,
            gamma_meas: 0.0,
            kappa: 1.0,
            nu1: 0.0,
            nu0: 0.0,
            eta: 1.0,
            dt_window: 0.1,
            tau: None,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("omega", self.omega),
            ("g", self.g),
            ("gamma_sp", self.gamma_sp),
            ("gamma_meas", self.gamma_meas),
            ("kappa", self.kappa),
            ("nu1", self.nu1),
            ("nu0", self.nu0),
        ];
        for (name, v) in rates {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be a finite non-negative rate, got {v}")));
            }
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(invalid(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.dt_window.is_finite() && self.dt_window > 0.0) {
            return Err(invalid(format!("dt_window must be positive, got {}", self.dt_window)));
        }
        if let Some(tau) = self.tau {
            if !tau.is_finite() {
                return Err(invalid("tau must be finite when given"));
            }
        }
        Ok(())
    }

    /// Relations of the ordering `Γ ≪ ν₀ < Ω, g < ν₁ ≤ γ, κ` that these
    /// parameters violate. Empty when the regime is the favourable one.
    pub fn regime_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, what: &str| {
            if !ok {
                out.push(what.to_string());
            }
        };
        check(self.gamma_sp * 10.0 <= self.nu0, "Γ ≪ ν₀");
        check(self.nu0 < self.omega, "ν₀ < Ω");
        check(self.nu0 < self.g, "ν₀ < g");
        check(self.omega < self.nu1, "Ω < ν₁");
        check(self.g < self.nu1, "g < ν₁");
        check(self.nu1 <= self.gamma_meas, "ν₁ ≤ γ");
        check(self.nu1 <= self.kappa, "ν₁ ≤ κ");
        out
    }

    pub fn warn_if_outside_regime(&self) {
        let v = self.regime_violations();
        if !v.is_empty() {
            warn!("parameters outside the favourable feedback regime: {}", v.join(", "));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PumpingOn,
    PumpingOff,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackOptions {
    /// Keep the measurement (dephasing and switching) channels active once
    /// pumping has been forced off.
    pub keep_measurement_after_stop: bool,
}

/// One dissipative channel `α 𝓗[L]`.
#[derive(Clone, Debug)]
pub struct LindbladTerm {
    pub rate: f64,
    pub operator: Operator,
}

impl LindbladTerm {
    pub fn new(rate: f64, operator: Operator) -> Result<Self> {
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(invalid(format!("Lindblad rate must be non-negative, got {rate}")));
        }
        Ok(Self { rate, operator })
    }

    pub fn superoperator(&self) -> Result<Array2<C64>> {
        Ok(dissipator(&self.operator)?.mapv(|z| z * self.rate))
    }
}

/// Superoperator `Σ c · (A ρ B)`, kept factored so it can be assembled densely
/// or restricted to a block without building the full matrix.
#[derive(Clone, Debug)]
pub(crate) struct Sandwich {
    parts: Vec<SandwichPart>,
}

#[derive(Clone, Debug)]
struct SandwichPart {
    coeff: C64,
    n: usize,
    left_nz: Vec<(usize, usize, C64)>,
    right_nz: Vec<(usize, usize, C64)>,
}

fn nonzeros(m: &Array2<C64>) -> Vec<(usize, usize, C64)> {
    m.indexed_iter()
        .filter(|(_, z)| z.norm() != 0.0)
        .map(|((i, j), z)| (i, j, *z))
        .collect()
}

impl Sandwich {
    fn new() -> Self {
        Self { parts: Vec::new() }
    }

    fn push(&mut self, coeff: C64, left: Array2<C64>, right: Array2<C64>) {
        let left_nz = nonzeros(&left);
        let right_nz = nonzeros(&right);
        let n = left.nrows();
        self.parts.push(SandwichPart { coeff, n, left_nz, right_nz });
    }

    fn dissipator(l: &Array2<C64>) -> Self {
        let n = l.nrows();
        let ld = l.t().mapv(|z| z.conj());
        let ldl = ld.dot(l);
        let mut s = Self::new();
        s.push(C64::from(1.0), l.clone(), ld);
        s.push(C64::from(-0.5), ldl.clone(), Array2::eye(n));
        s.push(C64::from(-0.5), Array2::eye(n), ldl);
        s
    }

    fn commutator(h: &Array2<C64>) -> Self {
        let n = h.nrows();
        let mut s = Self::new();
        s.push(C64::new(0.0, -1.0), h.clone(), Array2::eye(n));
        s.push(C64::new(0.0, 1.0), Array2::eye(n), h.clone());
        s
    }

    /// `out += rate · S` on the full vectorized space.
    fn add_dense_into(&self, out: &mut Array2<C64>, rate: f64) {
        if rate == 0.0 {
            return;
        }
        for p in &self.parts {
            let n = p.n;
            let c = p.coeff * rate;
            for &(i, k, a) in &p.left_nz {
                for &(l, j, b) in &p.right_nz {
                    out[[i * n + j, k * n + l]] += c * a * b;
                }
            }
        }
    }

    fn dense(&self, n: usize) -> Array2<C64> {
        let mut out = Array2::zeros((n * n, n * n));
        self.add_dense_into(&mut out, 1.0);
        out
    }

    /// Block of S acting within `sector`, after checking that S maps the
    /// sector into itself.
    fn restrict(&self, sector: &Sector) -> Result<Array2<C64>> {
        let m = sector.len();
        let mut out = Array2::<C64>::zeros((m, m));
        for p in &self.parts {
            // index the right factor by row for the `B[l, j]` lookups
            let mut right_rows: HashMap<usize, Vec<(usize, C64)>> = HashMap::new();
            for &(l, j, b) in &p.right_nz {
                right_rows.entry(l).or_default().push((j, b));
            }
            let mut left_cols: HashMap<usize, Vec<(usize, C64)>> = HashMap::new();
            for &(i, k, a) in &p.left_nz {
                left_cols.entry(k).or_default().push((i, a));
            }
            for (q, &(k, l)) in sector.pairs.iter().enumerate() {
                let (Some(col), Some(row)) = (left_cols.get(&k), right_rows.get(&l)) else {
                    continue;
                };
                for &(i, a) in col {
                    for &(j, b) in row {
                        let v = p.coeff * a * b;
                        match sector.position(i, j) {
                            Some(r) => out[[r, q]] += v,
                            None => {
                                return Err(Error::Numeric(format!(
                                    "generator leaks out of the sector: ({k},{l}) -> ({i},{j})"
                                )))
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `𝓗[L]ρ = LρL† − ½{L†L, ρ}` as a matrix on vectorized density matrices.
pub fn dissipator(l: &Operator) -> Result<Array2<C64>> {
    let m = l.matrix();
    if m.nrows() != m.ncols() || m.nrows() != l.space().total_dim() {
        return Err(invalid("Lindblad operator must be square and match its space"));
    }
    Ok(Sandwich::dissipator(m).dense(m.nrows()))
}

/// `ρ ↦ −i[H, ρ]` as a matrix on vectorized density matrices.
pub fn hamiltonian_part(h: &Operator) -> Result<Array2<C64>> {
    let m = h.matrix();
    if m.nrows() != m.ncols() || m.nrows() != h.space().total_dim() {
        return Err(invalid("Hamiltonian must be square and match its space"));
    }
    let err = h.hermiticity_error();
    if err > HERMITIAN_TOL {
        return Err(invalid(format!("Hamiltonian is not Hermitian (deviation {err:e})")));
    }
    Ok(Sandwich::commutator(m).dense(m.nrows()))
}

/// Jaynes–Cummings coupling `H = i g (a†σ⁻ − aσ⁺)` in the interaction picture.
pub fn jc_hamiltonian(g: f64, space: &SpaceDescriptor) -> Result<Operator> {
    if !(g.is_finite() && g >= 0.0) {
        return Err(invalid(format!("coupling must be non-negative, got {g}")));
    }
    let ops = ModelOperators::new(space)?;
    let emit = &ops.cavity.adjoint() * &ops.sigma_minus;
    let absorb = &ops.cavity * &ops.sigma_plus;
    Ok((&emit - &absorb).scale(C64::new(0.0, g)))
}

/// Coherence block closed under the model dynamics: pairs `(|i⟩, ⟨j|)` whose
/// dot+cavity excitation number, bath photon number and control level agree.
///
/// It contains every population, so any diagonal initial state evolves inside
/// it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sector {
    space: SpaceDescriptor,
    pairs: Vec<(usize, usize)>,
    positions: HashMap<(usize, usize), usize>,
}

impl Sector {
    pub fn populations(space: &SpaceDescriptor) -> Result<Self> {
        if space.num_subsystems() < 3 {
            return Err(invalid("sector needs dot, cavity and bath subsystems"));
        }
        let n = space.total_dim();
        let charges: Vec<(usize, usize, usize)> = (0..n)
            .map(|i| {
                let d = space.digits(i);
                let control = d.get(CONTROL).copied().unwrap_or(0);
                (d[DOT] + d[CAVITY], d[BATH], control)
            })
            .collect();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if charges[i] == charges[j] {
                    pairs.push((i, j));
                }
            }
        }
        let positions = pairs.iter().enumerate().map(|(p, &ij)| (ij, p)).collect();
        Ok(Self { space: space.clone(), pairs, positions })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.positions.get(&(i, j)).copied()
    }
}

/// Coordinate system of a generator: the full vectorized space or a closed
/// sector of it.
#[derive(Clone, Debug)]
pub enum Basis {
    Full(SpaceDescriptor),
    Sector(Arc<Sector>),
}

impl Basis {
    pub fn space(&self) -> &SpaceDescriptor {
        match self {
            Basis::Full(s) => s,
            Basis::Sector(sec) => sec.space(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Basis::Full(s) => s.total_dim().pow(2),
            Basis::Sector(sec) => sec.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, column)` of ρ addressed by coordinate `k`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        match self {
            Basis::Full(s) => {
                let n = s.total_dim();
                (k / n, k % n)
            }
            Basis::Sector(sec) => sec.pairs[k],
        }
    }

    /// Coordinates of a density state; fails if the state has weight outside
    /// the sector.
    pub fn coords_of(&self, rho: &DensityState) -> Result<Array1<C64>> {
        if rho.space() != self.space() {
            return Err(invalid("state and generator live on different spaces"));
        }
        match self {
            Basis::Full(_) => Ok(rho.vec().clone()),
            Basis::Sector(sec) => {
                let n = sec.space.total_dim();
                let v = rho.vec();
                let coords: Array1<C64> = sec.pairs.iter().map(|&(i, j)| v[i * n + j]).collect();
                let inside: f64 = coords.iter().map(|z| z.norm_sqr()).sum();
                let total: f64 = v.iter().map(|z| z.norm_sqr()).sum();
                if total - inside > 1e-24 * total.max(1.0) {
                    return Err(invalid("state has coherences outside the generator's sector"));
                }
                Ok(coords)
            }
        }
    }

    pub fn state_from_coords(&self, coords: &Array1<C64>, time: f64) -> DensityState {
        match self {
            Basis::Full(s) => DensityState::from_vec_unchecked(coords.clone(), s, time),
            Basis::Sector(sec) => {
                let n = sec.space.total_dim();
                let mut v = Array1::<C64>::zeros(n * n);
                for (&(i, j), z) in sec.pairs.iter().zip(coords) {
                    v[i * n + j] = *z;
                }
                DensityState::from_vec_unchecked(v, &sec.space, time)
            }
        }
    }

    /// Linear functional `coords ↦ Tr(ρ)`.
    pub fn trace_functional(&self) -> Array1<C64> {
        (0..self.len())
            .map(|k| {
                let (i, j) = self.pair(k);
                C64::from(if i == j { 1.0 } else { 0.0 })
            })
            .collect()
    }

    /// Linear functional `coords ↦ Σ_{i: pred(i)} ρ[i, i]`.
    pub fn population_functional(&self, pred: impl Fn(&[usize]) -> bool) -> Array1<C64> {
        let space = self.space();
        (0..self.len())
            .map(|k| {
                let (i, j) = self.pair(k);
                C64::from(if i == j && pred(&space.digits(i)) { 1.0 } else { 0.0 })
            })
            .collect()
    }
}

/// Dense GKSL generator acting on vectorized density matrices.
#[derive(Clone, Debug)]
pub struct LiouvillianMatrix {
    matrix: Array2<C64>,
    phase: Phase,
    basis: Basis,
}

impl LiouvillianMatrix {
    pub fn new(matrix: Array2<C64>, phase: Phase, basis: Basis) -> Result<Self> {
        let m = basis.len();
        if matrix.dim() != (m, m) {
            return Err(invalid(format!(
                "generator shape {:?} does not match basis size {m}",
                matrix.dim()
            )));
        }
        Ok(Self { matrix, phase, basis })
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn space(&self) -> &SpaceDescriptor {
        self.basis.space()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Largest `|Σ_i L[(i,i), k]|` over columns: zero for a trace-preserving
    /// generator.
    pub fn trace_preservation_error(&self) -> f64 {
        let tr = self.basis.trace_functional();
        (0..self.dim())
            .map(|k| {
                self.matrix
                    .column(k)
                    .iter()
                    .zip(&tr)
                    .map(|(a, t)| a * t)
                    .sum::<C64>()
                    .norm()
            })
            .fold(0.0, f64::max)
    }

    /// Induced ∞-norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        self.matrix
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Restriction to a closed sector of a full-space generator.
    pub fn restrict(&self, sector: &Arc<Sector>) -> Result<Self> {
        let Basis::Full(space) = &self.basis else {
            return Err(invalid("generator is already restricted"));
        };
        if space != sector.space() {
            return Err(invalid("sector lives on a different space"));
        }
        let n = space.total_dim();
        let full: Vec<usize> = sector.pairs.iter().map(|&(i, j)| i * n + j).collect();
        let mut leak = 0.0f64;
        for &c in &full {
            let col = self.matrix.column(c);
            let inside: f64 = full.iter().map(|&r| col[r].norm()).sum();
            let total: f64 = col.iter().map(|z| z.norm()).sum();
            leak = leak.max(total - inside);
        }
        if leak > 1e-13 * self.norm_inf().max(1.0) {
            return Err(Error::Numeric(format!("generator leaks out of the sector ({leak:e})")));
        }
        let m = full.len();
        let mut out = Array2::zeros((m, m));
        for (p, &r) in full.iter().enumerate() {
            for (q, &c) in full.iter().enumerate() {
                out[[p, q]] = self.matrix[[r, c]];
            }
        }
        Self::new(out, self.phase, Basis::Sector(sector.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Open-loop pumping, no measurement, no control subsystem.
    Deterministic,
    /// Continuous measurement with threshold switching of the pump.
    Feedback,
}

#[derive(Clone, Debug)]
struct TermSet<T> {
    hamiltonian: T,
    pump: T,
    emission: T,
    leakage: T,
    dephasing: Option<T>,
    switch_excited: Option<T>,
    switch_ground: Option<T>,
}

impl<T> TermSet<T> {
    fn try_map<U>(&self, f: impl Fn(&T) -> Result<U>) -> Result<TermSet<U>> {
        let opt = |x: &Option<T>| x.as_ref().map(&f).transpose();
        Ok(TermSet {
            hamiltonian: f(&self.hamiltonian)?,
            pump: f(&self.pump)?,
            emission: f(&self.emission)?,
            leakage: f(&self.leakage)?,
            dephasing: opt(&self.dephasing)?,
            switch_excited: opt(&self.switch_excited)?,
            switch_ground: opt(&self.switch_ground)?,
        })
    }
}

/// Effective channel rates of one phase, in assembly order.
struct PhaseRates {
    g: f64,
    gamma_sp: f64,
    kappa: f64,
    gamma_meas: f64,
    nu1: f64,
    nu0: f64,
    omega: f64,
}

fn phase_rates(
    kind: ModelKind,
    params: &ModelParams,
    phase: Phase,
    opts: FeedbackOptions,
) -> PhaseRates {
    let measuring = kind == ModelKind::Feedback
        && (phase == Phase::PumpingOn || opts.keep_measurement_after_stop);
    let (gamma_meas, nu1, nu0) =
        if measuring { (params.gamma_meas, params.nu1, params.nu0) } else { (0.0, 0.0, 0.0) };
    PhaseRates {
        g: params.g,
        gamma_sp: params.gamma_sp,
        kappa: params.kappa,
        gamma_meas,
        nu1,
        nu0,
        omega: if phase == Phase::PumpingOn { params.omega } else { 0.0 },
    }
}

/// Unit-rate channels of a model, assembled into generators for any rates.
///
/// Restricting to a sector once and re-assembling is how parameter sweeps avoid
/// rebuilding full-size superoperators.
#[derive(Clone, Debug)]
pub struct GeneratorTerms {
    kind: ModelKind,
    basis: Basis,
    factored: TermSet<Sandwich>,
    restricted: Option<TermSet<Array2<C64>>>,
}

impl GeneratorTerms {
    pub fn new(kind: ModelKind, space: &SpaceDescriptor) -> Result<Self> {
        let ops = ModelOperators::new(space)?;
        let h_unit = jc_hamiltonian(1.0, space)?;
        let jump = &ops.cavity * &ops.bath.adjoint();
        let (pump, dephasing, switch_excited, switch_ground) = match kind {
            ModelKind::Deterministic => (Sandwich::dissipator(ops.sigma_plus.matrix()), None, None, None),
            ModelKind::Feedback => {
                let (Some(c), Some(xi)) = (&ops.control, &ops.control_on) else {
                    return Err(invalid("feedback model needs a control subsystem"));
                };
                let ground = &Operator::identity(space) - &ops.excited;
                (
                    Sandwich::dissipator((&ops.sigma_plus * xi).matrix()),
                    Some(Sandwich::dissipator(ops.excited.matrix())),
                    Some(Sandwich::dissipator((c * &ops.excited).matrix())),
                    Some(Sandwich::dissipator((c * &ground).matrix())),
                )
            }
        };
        let factored = TermSet {
            hamiltonian: Sandwich::commutator(h_unit.matrix()),
            pump,
            emission: Sandwich::dissipator(ops.sigma_minus.matrix()),
            leakage: Sandwich::dissipator(jump.matrix()),
            dephasing,
            switch_excited,
            switch_ground,
        };
        Ok(Self { kind, basis: Basis::Full(space.clone()), factored, restricted: None })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// The same channels acting only within `sector`.
    pub fn restricted_to(&self, sector: Arc<Sector>) -> Result<Self> {
        let restricted = self.factored.try_map(|s| s.restrict(&sector))?;
        Ok(Self {
            kind: self.kind,
            basis: Basis::Sector(sector),
            factored: self.factored.clone(),
            restricted: Some(restricted),
        })
    }

    /// Restriction to the population sector of the model space.
    pub fn populations(&self) -> Result<Self> {
        let sector = Arc::new(Sector::populations(self.basis.space())?);
        self.restricted_to(sector)
    }

    pub fn assemble(
        &self,
        params: &ModelParams,
        phase: Phase,
        opts: FeedbackOptions,
    ) -> Result<LiouvillianMatrix> {
        params.validate()?;
        let r = phase_rates(self.kind, params, phase, opts);
        let m = self.basis.len();
        let mut out = Array2::<C64>::zeros((m, m));
        match &self.restricted {
            None => {
                let f = &self.factored;
                f.hamiltonian.add_dense_into(&mut out, r.g);
                f.emission.add_dense_into(&mut out, r.gamma_sp);
                f.leakage.add_dense_into(&mut out, r.kappa);
                let optional = [
                    (&f.dephasing, r.gamma_meas),
                    (&f.switch_excited, r.nu1),
                    (&f.switch_ground, r.nu0),
                ];
                for (term, rate) in optional {
                    if let Some(t) = term {
                        t.add_dense_into(&mut out, rate);
                    }
                }
                f.pump.add_dense_into(&mut out, r.omega);
            }
            Some(t) => {
                let mut add = |term: &Array2<C64>, rate: f64| {
                    if rate != 0.0 {
                        out.scaled_add(C64::from(rate), term);
                    }
                };
                add(&t.hamiltonian, r.g);
                add(&t.emission, r.gamma_sp);
                add(&t.leakage, r.kappa);
                let optional = [
                    (&t.dephasing, r.gamma_meas),
                    (&t.switch_excited, r.nu1),
                    (&t.switch_ground, r.nu0),
                ];
                for (term, rate) in optional {
                    if let Some(term) = term {
                        add(term, rate);
                    }
                }
                add(&t.pump, r.omega);
            }
        }
        LiouvillianMatrix::new(out, phase, self.basis.clone())
    }
}

/// Open-loop generator `−i[H, ·] + Ω𝓗[σ⁺] + Γ𝓗[σ⁻] + κ𝓗[a b†]`; the pump is
/// dropped when `phase` is [`Phase::PumpingOff`].
pub fn build_deterministic(
    params: &ModelParams,
    phase: Phase,
    space: &SpaceDescriptor,
) -> Result<LiouvillianMatrix> {
    GeneratorTerms::new(ModelKind::Deterministic, space)?.assemble(
        params,
        phase,
        FeedbackOptions::default(),
    )
}

/// Threshold-feedback generator
/// `−i[H, ·] + Ω𝓗[σ⁺ξ] + Γ𝓗[σ⁻] + κ𝓗[a b†] + γ𝓗[𝒫_X] + ν₁𝓗[c𝒫_X] + ν₀𝓗[c(I−𝒫_X)]`.
///
/// With pumping off the pump and, unless `keep_measurement_after_stop`, the
/// measurement channels are removed.
pub fn build_feedback(
    params: &ModelParams,
    phase: Phase,
    space: &SpaceDescriptor,
) -> Result<LiouvillianMatrix> {
    build_feedback_with(params, phase, space, FeedbackOptions::default())
}

pub fn build_feedback_with(
    params: &ModelParams,
    phase: Phase,
    space: &SpaceDescriptor,
    opts: FeedbackOptions,
) -> Result<LiouvillianMatrix> {
    if !space.has_control() {
        return Err(invalid("feedback model needs a control subsystem"));
    }
    GeneratorTerms::new(ModelKind::Feedback, space)?.assemble(params, phase, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{ladder, make_space, projector};
    use approx::assert_abs_diff_eq;

    fn max_abs(m: &Array2<C64>) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_channels_vanish() {
        let s = SpaceDescriptor::deterministic();
        let id = Operator::identity(&s);
        assert_eq!(max_abs(&dissipator(&id).unwrap()), 0.0);
        assert_eq!(max_abs(&hamiltonian_part(&id).unwrap()), 0.0);
    }

    #[test]
    fn two_level_decay_generator() {
        let s = make_space(&[2]).unwrap();
        let sm = Operator::from_matrix(ladder(2).unwrap().0, &s).unwrap();
        let d = dissipator(&sm).unwrap();
        let rho = DensityState::basis_state(&s, &[1]).unwrap();
        let drho = d.dot(rho.vec());
        // |G⟩⟨G| − |X⟩⟨X|
        let want = [1.0, 0.0, 0.0, -1.0];
        for (z, w) in drho.iter().zip(want) {
            assert_abs_diff_eq!(z.re, w, epsilon = 1e-15);
            assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn diagonal_hamiltonian_commutes_with_diagonal_state() {
        let s = make_space(&[3]).unwrap();
        let h = Operator::from_matrix(
            Array2::from_diag(&ndarray::array![C64::from(0.3), C64::from(-1.0), C64::from(2.0)]),
            &s,
        )
        .unwrap();
        let rho = DensityState::from_matrix(
            Array2::from_diag(&ndarray::array![C64::from(0.2), C64::from(0.5), C64::from(0.3)]),
            &s,
            0.0,
        )
        .unwrap();
        let out = hamiltonian_part(&h).unwrap().dot(rho.vec());
        assert!(out.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn non_hermitian_hamiltonian_rejected() {
        let s = make_space(&[2]).unwrap();
        let a = Operator::from_matrix(ladder(2).unwrap().0, &s).unwrap();
        assert!(hamiltonian_part(&a).is_err());
    }

    #[test]
    fn jaynes_cummings_structure() {
        let s = SpaceDescriptor::deterministic();
        assert_eq!(jc_hamiltonian(0.0, &s).unwrap().count_nonzero(), 0);
        let g = 0.37;
        let h = jc_hamiltonian(g, &s).unwrap();
        assert!(h.hermiticity_error() < 1e-15);
        let g1 = s.index_of(&[0, 1, 0]).unwrap();
        let x0 = s.index_of(&[1, 0, 0]).unwrap();
        assert_abs_diff_eq!((h.matrix()[[g1, x0]] - C64::new(0.0, g)).norm(), 0.0, epsilon = 1e-15);
        // only |X,n⟩ ↔ |G,n+1⟩ with all spectators equal
        for ((r, c), z) in h.matrix().indexed_iter() {
            if z.norm() == 0.0 {
                continue;
            }
            let (dr, dc) = (s.digits(r), s.digits(c));
            let (hi, lo) = if dr[0] == 1 { (&dr, &dc) } else { (&dc, &dr) };
            assert_eq!(hi[0], 1);
            assert_eq!(lo[0], 0);
            assert_eq!(lo[1], hi[1] + 1);
            assert_eq!(lo[2], hi[2]);
        }
    }

    #[test]
    fn trace_preserving_for_any_operator() {
        let s = make_space(&[3]).unwrap();
        let l = Operator::from_matrix(
            Array2::from_shape_fn((3, 3), |(i, j)| C64::new((i + 2 * j) as f64 - 1.5, (i * j) as f64)),
            &s,
        )
        .unwrap();
        let d = dissipator(&l).unwrap();
        let rho = DensityState::maximally_mixed(&s);
        let out = d.dot(rho.vec());
        let tr: C64 = (0..3).map(|i| out[i * 3 + i]).sum();
        assert!(tr.norm() < 1e-12);
    }

    #[test]
    fn lindblad_term_rejects_negative_rate() {
        let s = make_space(&[2]).unwrap();
        assert!(LindbladTerm::new(-1.0, Operator::identity(&s)).is_err());
        let t = LindbladTerm::new(2.0, Operator::identity(&s)).unwrap();
        assert_eq!(max_abs(&t.superoperator().unwrap()), 0.0);
    }

    #[test]
    fn pumping_off_is_pumping_on_without_pump() {
        let s = SpaceDescriptor::deterministic();
        let p = ModelParams { omega: 0.07, g: 0.05, gamma_sp: 0.002, ..Default::default() };
        let on = build_deterministic(&p, Phase::PumpingOn, &s).unwrap();
        let off = build_deterministic(&p, Phase::PumpingOff, &s).unwrap();
        let ops = ModelOperators::new(&s).unwrap();
        let pump = dissipator(&ops.sigma_plus).unwrap().mapv(|z| z * p.omega);
        let diff = on.matrix() - off.matrix() - pump;
        assert!(max_abs(&diff) <= 1e-15);
        assert_eq!(on.phase(), Phase::PumpingOn);
    }

    #[test]
    fn feedback_reduces_to_deterministic_on_control_on_block() {
        let det_space = SpaceDescriptor::deterministic();
        let fb_space = SpaceDescriptor::feedback();
        let p = ModelParams { omega: 0.1, g: 0.1, gamma_sp: 0.001, ..Default::default() };
        let det = build_deterministic(&p, Phase::PumpingOn, &det_space).unwrap();
        let fb = build_feedback(&p, Phase::PumpingOn, &fb_space).unwrap();
        let (nd, nf) = (18, 36);
        let lift = |i: usize| 2 * i + 1;
        let mut worst = 0.0f64;
        for r in 0..nd * nd {
            for c in 0..nd * nd {
                let rf = lift(r / nd) * nf + lift(r % nd);
                let cf = lift(c / nd) * nf + lift(c % nd);
                worst = worst.max((det.matrix()[[r, c]] - fb.matrix()[[rf, cf]]).norm());
            }
        }
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn feedback_requires_control() {
        let p = ModelParams::default();
        assert!(build_feedback(&p, Phase::PumpingOn, &SpaceDescriptor::deterministic()).is_err());
    }

    #[test]
    fn generators_preserve_trace() {
        let p = ModelParams {
            omega: 0.05,
            g: 0.05,
            gamma_meas: 10.0,
            nu1: 1.0,
            nu0: 0.2,
            ..Default::default()
        };
        for phase in [Phase::PumpingOn, Phase::PumpingOff] {
            let fb = build_feedback(&p, phase, &SpaceDescriptor::feedback()).unwrap();
            assert!(fb.trace_preservation_error() < 1e-10);
            let det = build_deterministic(&p, phase, &SpaceDescriptor::deterministic()).unwrap();
            assert!(det.trace_preservation_error() < 1e-10);
        }
    }

    #[test]
    fn restriction_matches_restricted_assembly() {
        let space = SpaceDescriptor::feedback();
        let p = ModelParams {
            omega: 0.03,
            g: 0.08,
            gamma_meas: 1.0,
            nu1: 0.5,
            nu0: 0.05,
            ..Default::default()
        };
        let terms = GeneratorTerms::new(ModelKind::Feedback, &space).unwrap();
        let reduced_terms = terms.populations().unwrap();
        let Basis::Sector(sector) = reduced_terms.basis().clone() else { panic!() };
        assert_eq!(sector.len(), 60);
        for phase in [Phase::PumpingOn, Phase::PumpingOff] {
            let full = terms.assemble(&p, phase, FeedbackOptions::default()).unwrap();
            let a = full.restrict(&sector).unwrap();
            let b = reduced_terms.assemble(&p, phase, FeedbackOptions::default()).unwrap();
            assert!(max_abs(&(a.matrix() - b.matrix())) < 1e-15);
            assert!(b.trace_preservation_error() < 1e-12);
        }
        let det = GeneratorTerms::new(ModelKind::Deterministic, &SpaceDescriptor::deterministic())
            .unwrap()
            .populations()
            .unwrap();
        assert_eq!(det.basis().len(), 30);
    }

    #[test]
    fn sector_rejects_leaking_generator() {
        // a coherent drive σ_x on the dot mixes excitation numbers
        let space = SpaceDescriptor::deterministic();
        let sx = &Operator::from_matrix(
            crate::algebra::embed(&(ladder(2).unwrap().0 + ladder(2).unwrap().1), 0, &space)
                .unwrap()
                .into_matrix(),
            &space,
        )
        .unwrap();
        let m = hamiltonian_part(sx).unwrap();
        let l = LiouvillianMatrix::new(m, Phase::PumpingOn, Basis::Full(space.clone())).unwrap();
        let sector = Arc::new(Sector::populations(&space).unwrap());
        assert!(l.restrict(&sector).is_err());
        let _ = projector(2, 0).unwrap();
    }

    #[test]
    fn regime_check() {
        let good = ModelParams {
            omega: 0.05,
            g: 0.05,
            gamma_sp: 0.0001,
            gamma_meas: 10.0,
            nu1: 1.0,
            nu0: 0.02,
            ..Default::default()
        };
        assert!(good.regime_violations().is_empty());
        let bad = ModelParams { nu1: 0.01, ..good };
        assert!(!bad.regime_violations().is_empty());
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams { omega: -0.1, ..Default::default() }.validate().is_err());
        assert!(ModelParams { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(ModelParams { dt_window: 0.0, ..Default::default() }.validate().is_err());
        assert!(ModelParams::default().validate().is_ok());
    }
}
