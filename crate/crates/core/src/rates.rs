//! Threshold-crossing probabilities of the window-averaged measurement current
//! and the control switch-off rates they induce.
//!
//! The averaged current is Gaussian with mean `μΔt` and variance `Δt/ηγ`,
//! `μ ∈ {0, 1}` being the dot population. With `a = ηγΔt` and `T = τ/Δt`,
//! `p(μ) = ½ erfc(√(a/2)(T − μ))` and `ν_μ = p(μ)/Δt`.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{invalid, Error, Result};
use crate::generator::ModelParams;

/// Normalized thresholds below this are outside the asymptotic regime.
pub const ASYMPTOTIC_T_MIN: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatePathway {
    /// Complementary error function throughout; τ by inversion.
    #[default]
    Exact,
    /// First-order tail expansion with the closed-form τ and ν₀.
    Approximate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub eta: f64,
    pub gamma_meas: f64,
    pub dt_window: f64,
    pub tau: Option<f64>,
}

impl MeasurementModel {
    pub fn new(eta: f64, gamma_meas: f64, dt_window: f64) -> Result<Self> {
        let m = Self { eta, gamma_meas, dt_window, tau: None };
        m.validate()?;
        Ok(m)
    }

    pub fn from_params(p: &ModelParams) -> Result<Self> {
        let m = Self { eta: p.eta, gamma_meas: p.gamma_meas, dt_window: p.dt_window, tau: p.tau };
        m.validate()?;
        Ok(m)
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(invalid(format!("threshold must be finite, got {tau}")));
        }
        self.tau = Some(tau);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(invalid(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.gamma_meas.is_finite() && self.gamma_meas > 0.0) {
            return Err(invalid(format!("measurement rate must be positive, got {}", self.gamma_meas)));
        }
        if !(self.dt_window.is_finite() && self.dt_window > 0.0) {
            return Err(invalid(format!("dt_window must be positive, got {}", self.dt_window)));
        }
        Ok(())
    }

    /// `ηγΔt`, the signal-to-noise ratio of one window.
    pub fn snr(&self) -> f64 {
        self.eta * self.gamma_meas * self.dt_window
    }

    /// Noise scale `(ηγ)^(−1/2)`.
    pub fn beta(&self) -> f64 {
        (self.eta * self.gamma_meas).powf(-0.5)
    }

    /// `T = τ/Δt`.
    pub fn t_big(&self) -> Result<f64> {
        self.tau
            .map(|tau| tau / self.dt_window)
            .ok_or_else(|| invalid("measurement model has no threshold"))
    }

    /// Whether `T` is large enough for the asymptotic rate formulas.
    pub fn asymptotic_regime(&self) -> Result<bool> {
        Ok(self.t_big()? >= ASYMPTOTIC_T_MIN)
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(invalid(format!("dot population must lie in [0, 1], got {mu}")));
    }
    Ok(())
}

pub fn exceed_probability_exact(mu: f64, model: &MeasurementModel) -> Result<f64> {
    check_mu(mu)?;
    let t = model.t_big()?;
    Ok(0.5 * erfc((model.snr() / 2.0).sqrt() * (t - mu)))
}

/// First-order tail expansion `exp(−a(T−μ)²/2) / (√(2πa)(T−μ))`.
pub fn exceed_probability_approx(mu: f64, model: &MeasurementModel) -> Result<f64> {
    check_mu(mu)?;
    let t = model.t_big()?;
    let x = t - mu;
    if !(x > 0.0) {
        return Err(Error::Domain(format!("tail expansion needs T − μ > 0, got {x}")));
    }
    let a = model.snr();
    if t < ASYMPTOTIC_T_MIN {
        warn!("normalized threshold T = {t:.3} is small; the tail expansion is inaccurate");
    }
    Ok((-a * x * x / 2.0).exp() / ((2.0 * std::f64::consts::PI * a).sqrt() * x))
}

pub fn switch_rate(mu: f64, model: &MeasurementModel, pathway: RatePathway) -> Result<f64> {
    let p = match pathway {
        RatePathway::Exact => exceed_probability_exact(mu, model)?,
        RatePathway::Approximate => exceed_probability_approx(mu, model)?,
    };
    Ok(p / model.dt_window)
}

/// `ln(1/(ν₁Δt√(2πa)))`, which must be positive.
fn log_argument(nu1: f64, model: &MeasurementModel) -> Result<f64> {
    if !(nu1.is_finite() && nu1 > 0.0) {
        return Err(invalid(format!("nu1 must be positive, got {nu1}")));
    }
    let x = nu1 * model.dt_window * (2.0 * std::f64::consts::PI * model.snr()).sqrt();
    if x >= 1.0 {
        return Err(Error::Domain(format!(
            "nu1 = {nu1} too large for a threshold regime (ν₁Δt√(2πηγΔt) = {x:.4} ≥ 1)"
        )));
    }
    Ok(-x.ln())
}

/// Closed-form threshold `τ = TΔt` with
/// `T = 1 + √(1 + (2/a) ln(1/(ν₁Δt√(2πa))))`.
pub fn tau_from_nu1(nu1: f64, model: &MeasurementModel) -> Result<f64> {
    let l = log_argument(nu1, model)?;
    let t = 1.0 + (1.0 + 2.0 * l / model.snr()).sqrt();
    Ok(t * model.dt_window)
}

/// Threshold at which the exact switch rate with the dot excited equals `nu1`.
pub fn tau_from_nu1_exact(nu1: f64, model: &MeasurementModel) -> Result<f64> {
    if !(nu1.is_finite() && nu1 > 0.0) {
        return Err(invalid(format!("nu1 must be positive, got {nu1}")));
    }
    let p = nu1 * model.dt_window;
    if p >= 0.5 {
        return Err(Error::Domain(format!(
            "nu1 = {nu1} needs a threshold below the excited mean (ν₁Δt = {p} ≥ ½)"
        )));
    }
    let t = 1.0 + erfc_inv(2.0 * p) / (model.snr() / 2.0).sqrt();
    Ok(t * model.dt_window)
}

/// Closed form `ν₀ ≈ ν₁ exp(−√(2a ln(1/(ν₁Δt√(2πa)))))`.
pub fn nu0_from_nu1(nu1: f64, model: &MeasurementModel) -> Result<f64> {
    let l = log_argument(nu1, model)?;
    Ok(nu1 * (-(2.0 * model.snr() * l).sqrt()).exp())
}

/// Brute-force ν₀: bisect `T ∈ (1, 50]` until the exact excited-state rate
/// equals `nu1`, then evaluate the ground-state rate there.
pub fn nu0_oracle(nu1: f64, model: &MeasurementModel) -> Result<f64> {
    if !(nu1.is_finite() && nu1 > 0.0) {
        return Err(invalid(format!("nu1 must be positive, got {nu1}")));
    }
    let rate_at = |t: f64| -> Result<f64> {
        switch_rate(1.0, &model.with_tau(t * model.dt_window)?, RatePathway::Exact)
    };
    let (mut lo, mut hi) = (1.0, 50.0);
    let (f_lo, f_hi) = (rate_at(lo)? - nu1, rate_at(hi)? - nu1);
    if f_lo <= 0.0 || f_hi > 0.0 {
        return Err(Error::Domain(format!("no threshold T in (1, 50] gives nu1 = {nu1}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate_at(mid)? > nu1 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    switch_rate(0.0, &model.with_tau(0.5 * (lo + hi) * model.dt_window)?, RatePathway::Exact)
}

impl ModelParams {
    /// Set `nu1` and derive the threshold and `nu0` from it. `nu1 = 0` turns
    /// switching off entirely.
    pub fn with_threshold_rates(&self, nu1: f64, pathway: RatePathway) -> Result<ModelParams> {
        let mut out = self.clone();
        if nu1 == 0.0 {
            out.nu1 = 0.0;
            out.nu0 = 0.0;
            out.tau = None;
            return Ok(out);
        }
        let model = MeasurementModel::from_params(self)?;
        let (tau, nu0) = match pathway {
            RatePathway::Exact => {
                let tau = tau_from_nu1_exact(nu1, &model)?;
                (tau, switch_rate(0.0, &model.with_tau(tau)?, RatePathway::Exact)?)
            }
            RatePathway::Approximate => (tau_from_nu1(nu1, &model)?, nu0_from_nu1(nu1, &model)?),
        };
        out.nu1 = nu1;
        out.nu0 = nu0;
        out.tau = Some(tau);
        Ok(out)
    }
}
