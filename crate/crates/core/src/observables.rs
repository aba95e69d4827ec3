//! Photon-number statistics and populations read off density states.

use ndarray::Array1;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::algebra::{partial_trace, BATH, CONTROL, DOT};
use crate::error::{invalid, Error, Result};
use crate::generator::Basis;
use crate::DensityState;

/// Slack allowed on probabilities before they count as unphysical.
pub const PROBABILITY_TOL: f64 = 1e-9;

/// Distribution of the number of photons emitted into the waveguide.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionStats {
    pub p0: f64,
    pub p1: f64,
    /// Weight of the top bath level, i.e. two or more photons.
    pub p2plus: f64,
    /// Time of the state these were read from; `None` for an asymptotic state.
    pub source_time: Option<f64>,
}

impl EmissionStats {
    pub fn new(p0: f64, p1: f64, p2plus: f64, source_time: Option<f64>) -> Result<Self> {
        for (name, p) in [("p0", p0), ("p1", p1), ("p2plus", p2plus)] {
            if !(p >= -PROBABILITY_TOL && p <= 1.0 + PROBABILITY_TOL) {
                return Err(Error::Positivity(format!("{name} = {p:e} is not a probability")));
            }
        }
        let sum = p0 + p1 + p2plus;
        if (sum - 1.0).abs() > PROBABILITY_TOL {
            return Err(Error::Positivity(format!("photon-number probabilities sum to {sum}")));
        }
        Ok(Self { p0, p1, p2plus, source_time })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p0, self.p1, self.p2plus]
    }
}

fn source_time(rho: &DensityState) -> Option<f64> {
    rho.time().is_finite().then(|| rho.time())
}

/// Diagonal of the bath marginal in the Fock basis.
pub fn emission_stats(rho: &DensityState) -> Result<EmissionStats> {
    let bath = partial_trace(rho, BATH)?;
    if bath.nrows() != 3 {
        return Err(invalid(format!("bath must have 3 levels, got {}", bath.nrows())));
    }
    EmissionStats::new(bath[[0, 0]].re, bath[[1, 1]].re, bath[[2, 2]].re, source_time(rho))
}

fn population_where(rho: &DensityState, pred: impl Fn(&[usize]) -> bool) -> f64 {
    let space = rho.space();
    (0..space.total_dim())
        .filter(|&i| pred(&space.digits(i)))
        .map(|i| rho.population(i))
        .sum()
}

/// `Tr(𝒫_X ρ)`.
pub fn excited_population(rho: &DensityState) -> f64 {
    population_where(rho, |d| d[DOT] == 1)
}

/// `Tr(ξ ρ)`, the probability that pumping is still ON.
pub fn control_on_population(rho: &DensityState) -> Result<f64> {
    if !rho.space().has_control() {
        return Err(invalid("state has no control subsystem"));
    }
    Ok(population_where(rho, |d| d[CONTROL] == 1))
}

/// Linear functionals giving p0, p1 and p2plus from generator coordinates.
pub fn bath_functionals(basis: &Basis) -> [Array1<C64>; 3] {
    [0, 1, 2].map(|m| basis.population_functional(|d| d[BATH] == m))
}

/// One sample of a trajectory dump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub time: f64,
    pub p0: f64,
    pub p1: f64,
    pub p2plus: f64,
    pub p_x: f64,
    /// NaN on spaces without a control subsystem.
    pub p_control_on: f64,
    pub trace_error: f64,
}

impl TrajectoryRow {
    pub const HEADER: [&'static str; 7] =
        ["time", "p0", "p1", "p2plus", "pX", "pcontrol_on", "trace_error"];

    pub fn from_state(rho: &DensityState) -> Result<Self> {
        let stats = emission_stats(rho)?;
        Ok(Self {
            time: rho.time(),
            p0: stats.p0,
            p1: stats.p1,
            p2plus: stats.p2plus,
            p_x: excited_population(rho),
            p_control_on: control_on_population(rho).unwrap_or(f64::NAN),
            trace_error: (rho.trace() - C64::from(1.0)).norm(),
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [self.time, self.p0, self.p1, self.p2plus, self.p_x, self.p_control_on, self.trace_error]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::SpaceDescriptor;
    use crate::generator::{build_feedback, GeneratorTerms, ModelKind, ModelParams, Phase};
    use crate::propagate::{rk4_trajectory, Rk4Options};
    use ndarray::Array2;

    #[test]
    fn fock_bath_state() {
        let s = SpaceDescriptor::feedback();
        let rho = DensityState::basis_state(&s, &[0, 0, 1, 0]).unwrap();
        let e = emission_stats(&rho).unwrap();
        assert_eq!(e.as_array(), [0.0, 1.0, 0.0]);
        assert_eq!(e.source_time, Some(0.0));
    }

    #[test]
    fn mixed_bath_marginal() {
        let s = SpaceDescriptor::deterministic();
        let e = emission_stats(&DensityState::maximally_mixed(&s)).unwrap();
        for p in e.as_array() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn populations() {
        let s = SpaceDescriptor::feedback();
        let x = DensityState::basis_state(&s, &[1, 0, 0, 1]).unwrap();
        assert_eq!(excited_population(&x), 1.0);
        let g = DensityState::basis_state(&s, &[0, 1, 0, 1]).unwrap();
        assert_eq!(excited_population(&g), 0.0);
        assert_eq!(control_on_population(&g).unwrap(), 1.0);
        let det = DensityState::initial(&SpaceDescriptor::deterministic()).unwrap();
        assert!(control_on_population(&det).is_err());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        assert!(EmissionStats::new(1.1, -0.1, 0.0, None).is_err());
        assert!(EmissionStats::new(0.5, 0.4, 0.0, None).is_err());
        assert!(EmissionStats::new(0.5, 0.5, 0.0, None).is_ok());
        let s = SpaceDescriptor::deterministic();
        let mut m = Array2::<C64>::zeros((18, 18));
        m[[0, 0]] = C64::from(0.5);
        let bad = DensityState::from_matrix_unchecked(m, &s, 0.0);
        assert!(matches!(emission_stats(&bad), Err(Error::Positivity(_))));
    }

    #[test]
    fn control_switches_off_and_stays_without_switching() {
        let s = SpaceDescriptor::feedback();
        let rho = DensityState::initial(&s).unwrap();
        let times = [0.0, 5.0, 40.0];
        let opts = Rk4Options { dt: 0.005, ..Default::default() };
        let p = ModelParams { omega: 0.05, g: 0.05, gamma_meas: 10.0, nu1: 1.0, nu0: 0.2, ..Default::default() };
        let on = build_feedback(&p, Phase::PumpingOn, &s).unwrap();
        let traj = rk4_trajectory(&on, &rho, &times, opts).unwrap();
        let c: Vec<f64> = traj.iter().map(|r| control_on_population(r).unwrap()).collect();
        assert!(c[0] == 1.0 && c[1] < c[0] && c[2] < 1e-3);

        let still = ModelParams { nu1: 0.0, nu0: 0.0, ..p };
        let terms = GeneratorTerms::new(ModelKind::Feedback, &s).unwrap().populations().unwrap();
        let on = terms.assemble(&still, Phase::PumpingOn, Default::default()).unwrap();
        for r in rk4_trajectory(&on, &rho, &times, opts).unwrap() {
            assert!((control_on_population(&r).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn functionals_match_state_readout() {
        let s = SpaceDescriptor::deterministic();
        let terms = GeneratorTerms::new(ModelKind::Deterministic, &s).unwrap().populations().unwrap();
        let rho = DensityState::maximally_mixed(&s);
        let x = terms.basis().coords_of(&rho).unwrap();
        let f = bath_functionals(terms.basis());
        let e = emission_stats(&rho).unwrap();
        for (fi, p) in f.iter().zip(e.as_array()) {
            assert!((fi.dot(&x).re - p).abs() < 1e-15);
        }
        let row = TrajectoryRow::from_state(&rho).unwrap();
        assert!(row.p_control_on.is_nan());
        assert!(row.trace_error < 1e-15);
    }
}
