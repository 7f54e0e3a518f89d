//! Private release of the truncation threshold from the buffered prefix.
//!
//! The released value is
//!
//! ```text
//! tau = x + (kappa * SS / a) * (noise + G^-1(1 - beta_lt))
//! ```
//!
//! where `x` is the level-`lambda * p` empirical quantile, `SS` its
//! `b`-smooth sensitivity and `G` the CDF of the unit noise. The factor
//! `kappa = 1 / (1 - (e^b - 1) G^-1(1 - beta_lt) / a)` inflates `SS` so that
//! the deterministic offset is itself covered by the smooth bound, and
//! depends on public parameters only.

use serde::{Deserialize, Serialize};

use crate::budget::PrivacyBudget;
use crate::error::{check_unit_open, Error, Result};
use crate::noise::{inverse_cdf, NoiseKind, Rng};
use crate::quantile::{smooth_quantile, SortedPrefix};

pub const DEFAULT_P_MAX: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub p: f64,
    pub lambda: f64,
    pub r: f64,
    pub p_max: f64,
    pub beta_lt: f64,
    pub beta_rt: f64,
    pub noise_kind: NoiseKind,
    /// Noise-to-sensitivity divisor.
    pub a: f64,
    /// Smoothing parameter.
    pub b: f64,
}

/// Smoothing parameter `min(1, eps / (-2 ln delta))`.
pub fn smoothing_b(epsilon: f64, delta: f64) -> f64 {
    (epsilon / (-2.0 * delta.ln())).min(1.0)
}

/// Divisor `a` for the release: `eps/2` for Laplace, `eps/sqrt(-ln delta)` for Gaussian.
pub fn release_a(kind: NoiseKind, epsilon: f64, delta: f64) -> f64 {
    match kind {
        NoiseKind::Laplace => epsilon / 2.0,
        NoiseKind::Gaussian => epsilon / (-delta.ln()).sqrt(),
    }
}

impl ThresholdParams {
    /// Parameters with `a` and `b` calibrated to `(epsilon1, delta)`.
    pub fn calibrated(
        p: f64,
        lambda: f64,
        r: f64,
        beta_lt: f64,
        beta_rt: f64,
        noise_kind: NoiseKind,
        budget: &PrivacyBudget,
    ) -> Self {
        ThresholdParams {
            p,
            lambda,
            r,
            p_max: DEFAULT_P_MAX,
            beta_lt,
            beta_rt,
            noise_kind,
            a: release_a(noise_kind, budget.epsilon1(), budget.delta()),
            b: smoothing_b(budget.epsilon1(), budget.delta()),
        }
    }

    pub fn with_p_max(mut self, p_max: f64) -> Self {
        self.p_max = p_max;
        self
    }

    /// Level of the estimated quantile, `lambda * p`.
    pub fn level(&self) -> f64 {
        self.lambda * self.p
    }

    /// Checks everything except the dependence on `m` and the budget.
    pub fn validate(&self) -> Result<()> {
        check_unit_open("p_max", self.p_max)?;
        if !(self.p > 0.0 && self.p <= self.p_max) {
            return Err(Error::param("p", self.p, "must lie in (0, p_max]"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::param("lambda", self.lambda, "must lie in (0, 1]"));
        }
        if !(self.r >= 1.0 && self.r.is_finite()) {
            return Err(Error::param("r", self.r, "must be at least 1"));
        }
        for (name, beta) in [("beta_lt", self.beta_lt), ("beta_rt", self.beta_rt)] {
            if !(beta > 0.0 && beta < 0.5) {
                return Err(Error::param(name, beta, "must lie in (0, 1/2)"));
            }
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::param("a", self.a, "must be positive"));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::param("b", self.b, "must be positive"));
        }
        Ok(())
    }

    /// Additionally checks `lambda > 1/(p m)` and `b <= eps1 / (-2 ln delta)`.
    pub fn validate_for(&self, m: usize, budget: &PrivacyBudget) -> Result<()> {
        self.validate()?;
        if self.lambda <= 1.0 / (self.p * m as f64) {
            return Err(Error::param("lambda", self.lambda, "must exceed 1/(p m)"));
        }
        let b_max = budget.epsilon1() / (-2.0 * budget.delta().ln());
        if self.b > b_max * (1.0 + 1e-12) {
            return Err(Error::param("b", self.b, "exceeds eps1 / (-2 ln delta)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub x_hat: f64,
    pub rank: usize,
    pub ss: f64,
    pub kappa: f64,
    /// The unit-scale noise draw (0 in the diagnostic mode).
    pub noise: f64,
    pub tau: f64,
    pub tau_max: f64,
    /// `min(r * tau, bound)`; the value used for truncation and noise scaling.
    pub tau_final: f64,
    pub epsilon1_spent: f64,
    pub delta_spent: f64,
}

impl ThresholdEstimate {
    /// Recomputes `tau` from the logged quantile, sensitivity and noise.
    pub fn recompute_tau(&self, params: &ThresholdParams) -> Result<f64> {
        let offset = inverse_cdf(params.noise_kind, 1.0 - params.beta_lt)?;
        Ok(self.x_hat + self.kappa * self.ss / params.a * (self.noise + offset))
    }
}

pub fn compute_kappa(params: &ThresholdParams) -> Result<f64> {
    let offset = inverse_cdf(params.noise_kind, 1.0 - params.beta_lt)?;
    kappa_from(params.a, params.b, offset)
}

pub(crate) fn kappa_from(a: f64, b: f64, offset: f64) -> Result<f64> {
    let shrink = b.exp_m1() * offset / a;
    if !(shrink < 1.0) {
        return Err(Error::Infeasible(format!(
            "kappa undefined: (e^b - 1) G^-1(1 - beta_lt) / a = {shrink} >= 1"
        )));
    }
    Ok(1.0 / (1.0 - shrink))
}

/// Upper bound on the released threshold that holds with probability `1 - beta_rt`.
pub fn tau_upper_bound(x_hat: f64, ss: f64, kappa: f64, params: &ThresholdParams) -> Result<f64> {
    let lower_offset = inverse_cdf(params.noise_kind, 1.0 - params.beta_lt)?;
    let upper_offset = inverse_cdf(params.noise_kind, 1.0 - params.beta_rt)?;
    Ok(x_hat + kappa * ss / params.a * (lower_offset + upper_offset))
}

/// Releases the threshold from the buffered prefix, spending `(epsilon1, delta)`.
///
/// `rng = None` is the zero-noise diagnostic path (NOT private): the noise
/// term is dropped and `tau` equals the offset estimate.
pub fn release_threshold(
    prefix: &SortedPrefix,
    params: &ThresholdParams,
    budget: &PrivacyBudget,
    rng: Option<&mut Rng>,
) -> Result<ThresholdEstimate> {
    if prefix.m() < 2 {
        return Err(Error::InsufficientData(format!(
            "threshold release needs at least 2 buffered values, got {}",
            prefix.m()
        )));
    }
    params.validate_for(prefix.m(), budget)?;
    let kappa = compute_kappa(params)?;
    let sq = smooth_quantile(prefix, params.level(), params.b)?;
    let offset = inverse_cdf(params.noise_kind, 1.0 - params.beta_lt)?;
    let noise = match rng {
        Some(rng) => rng.unit_noise(params.noise_kind),
        None => 0.0,
    };
    let x_hat = sq.quantile.value;
    let ss = sq.smooth_sensitivity;
    let tau = x_hat + kappa * ss / params.a * (noise + offset);
    let tau_max = tau_upper_bound(x_hat, ss, kappa, params)?;
    Ok(ThresholdEstimate {
        x_hat,
        rank: sq.quantile.rank,
        ss,
        kappa,
        noise,
        tau,
        tau_max,
        tau_final: (params.r * tau).min(prefix.bound()),
        epsilon1_spent: budget.epsilon1(),
        delta_spent: budget.delta(),
    })
}
