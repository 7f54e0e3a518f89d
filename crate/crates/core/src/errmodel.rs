//! Closed-form error bounds for the thresholded tree mechanism.

use serde::{Deserialize, Serialize};

use crate::budget::ErrorBudget;
use crate::error::{check_positive, check_unit_open, Error, Result};

/// Which stream length the outlier term counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierHorizon {
    /// All `n` observations, as in the published bound.
    #[default]
    Full,
    /// Only the `n - m` observations that are actually truncated.
    AfterLag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailModel {
    /// Every tail observation sits at the bound.
    WorstCase,
    /// Exponential tail beyond the quantile.
    LightTailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityParams {
    pub n: u64,
    pub m: u64,
    pub epsilon: f64,
    pub tau: f64,
    pub r: f64,
    pub p: f64,
    pub x_hat_lambda_p: f64,
    pub bound: f64,
    pub error_budget: ErrorBudget,
}

impl UtilityParams {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m >= self.n {
            return Err(Error::param("m", self.m as f64, "must satisfy 0 < m < n"));
        }
        check_positive("epsilon", self.epsilon)?;
        check_positive("tau", self.tau)?;
        check_positive("bound", self.bound)?;
        check_unit_open("p", self.p)?;
        if !(self.r >= 1.0) {
            return Err(Error::param("r", self.r, "must be at least 1"));
        }
        if !(self.x_hat_lambda_p > 0.0) {
            return Err(Error::param("x_hat_lambda_p", self.x_hat_lambda_p, "must be positive"));
        }
        Ok(())
    }

    /// Soft checks of `n >> m >> 1/p`; violations are reported, not rejected.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if (self.m as f64) * self.p < 10.0 {
            out.push(format!(
                "m * p = {:.3} < 10: the quantile estimate is unstable",
                self.m as f64 * self.p
            ));
        }
        if self.n < 10 * self.m {
            out.push(format!(
                "n = {} < 10 m: the time lag is a large share of the stream",
                self.n
            ));
        }
        out
    }

    /// Noise sensitivity actually used by the tree: `min(r * tau, bound)`.
    pub fn effective_threshold(&self) -> f64 {
        (self.r * self.tau).min(self.bound)
    }
}

/// `(1/eps) * log2(n_eff)^1.5 * scale * sqrt(8 ln(1/beta_lap))`.
pub fn bt_error_term(n_eff: u64, scale: f64, epsilon: f64, beta_lap: f64) -> Result<f64> {
    if n_eff == 0 {
        return Err(Error::param("n_eff", 0.0, "must be positive"));
    }
    check_positive("scale", scale)?;
    check_positive("epsilon", epsilon)?;
    check_unit_open("beta_lap", beta_lap)?;
    let depth = (n_eff as f64).log2();
    Ok(depth.powf(1.5) * scale * (8.0 * (1.0 / beta_lap).ln()).sqrt() / epsilon)
}

/// Outlier error when the tail mass `p` sits entirely at the bound:
/// `p n (B - tau) (ln(1/beta_out) + 1)`.
pub fn outlier_bound_worst_case(n_eff: u64, p: f64, bound: f64, tau: f64, beta_out: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::param("p", p, "must lie in [0, 1)"));
    }
    check_unit_open("beta_out", beta_out)?;
    if !(tau < bound) {
        return Err(Error::param("tau", tau, "must be below the bound"));
    }
    Ok(p * n_eff as f64 * (bound - tau) * ((1.0 / beta_out).ln() + 1.0))
}

/// Outlier error under an exponential tail beyond the level-`p` quantile with
/// the threshold lifted by `r`:
/// `(-x / ln p) (sqrt(p^r n) + sqrt(ln(1/beta_out)))^2`.
pub fn outlier_bound_light_tailed(n_eff: u64, p: f64, r: f64, x_quantile: f64, beta_out: f64) -> Result<f64> {
    check_unit_open("p", p)?;
    check_unit_open("beta_out", beta_out)?;
    if !(r >= 1.0) {
        return Err(Error::param("r", r, "must be at least 1"));
    }
    if !(x_quantile >= 0.0) {
        return Err(Error::param("x_quantile", x_quantile, "must be nonnegative"));
    }
    let root = (p.powf(r) * n_eff as f64).sqrt() + (1.0 / beta_out).ln().sqrt();
    Ok(-x_quantile / p.ln() * root * root)
}

pub fn total_alpha(params: &UtilityParams, model: TailModel, horizon: OutlierHorizon) -> Result<f64> {
    params.validate()?;
    let budget = &params.error_budget;
    let outlier_n = match horizon {
        OutlierHorizon::Full => params.n,
        OutlierHorizon::AfterLag => params.n - params.m,
    };
    let tree_n = params.n - params.m;
    Ok(match model {
        TailModel::WorstCase => {
            bt_error_term(tree_n, params.tau, params.epsilon, budget.beta_lap)?
                + outlier_bound_worst_case(outlier_n, params.p, params.bound, params.tau, budget.beta_out)?
        }
        TailModel::LightTailed => {
            bt_error_term(tree_n, params.effective_threshold(), params.epsilon, budget.beta_lap)?
                + outlier_bound_light_tailed(outlier_n, params.p, params.r, params.x_hat_lambda_p, budget.beta_out)?
        }
    })
}

/// Baseline error divided by mechanism error.
pub fn improvement_factor(alpha_baseline: f64, alpha_mechanism: f64) -> Result<f64> {
    check_positive("alpha_baseline", alpha_baseline)?;
    check_positive("alpha_mechanism", alpha_mechanism)?;
    Ok(alpha_baseline / alpha_mechanism)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_eq(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    fn params() -> UtilityParams {
        UtilityParams {
            n: 1 << 20,
            m: 100_000,
            epsilon: 1.0,
            tau: 170.0,
            r: 1.5,
            p: 0.005,
            x_hat_lambda_p: 155.0,
            bound: 1440.0,
            error_budget: ErrorBudget::equal_split(0.02).unwrap(),
        }
    }

    #[test]
    fn bt_term_examples() {
        let t = bt_error_term(1 << 20, 1.0, 1.0, 0.02).unwrap();
        let oracle = 20f64.powf(1.5) * (8.0 * 50f64.ln()).sqrt();
        assert!(rel_eq(t, oracle, 1e-12));
        assert!((t - 500.3).abs() < 0.1, "{t}");
        let doubled = bt_error_term(1 << 20, 2.0, 1.0, 0.02).unwrap();
        assert!(rel_eq(doubled, 2.0 * t, 1e-15));
        let base = bt_error_term(999_000, 1440.0, 1.0, 0.004).unwrap();
        let mech = bt_error_term(999_000, 1.5 * 170.0, 1.0, 0.004).unwrap();
        assert!(rel_eq(base / mech, 1440.0 / 255.0, 1e-12));
        assert!(bt_error_term(0, 1.0, 1.0, 0.02).is_err());
        assert!(bt_error_term(10, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn worst_case_examples() {
        assert_eq!(outlier_bound_worst_case(1000, 0.0, 10.0, 5.0, 0.01).unwrap(), 0.0);
        let n = 1_000_000u64;
        let v = outlier_bound_worst_case(n, 1.0 / n as f64, 2000.0, 1000.0, 0.01).unwrap();
        assert!((v - 1000.0 * (100f64.ln() + 1.0)).abs() < 1e-6);
        assert!((v - 5605.2).abs() < 0.1);
        assert!(outlier_bound_worst_case(n, 0.01, 10.0, 10.0, 0.01).is_err());
    }

    #[test]
    fn light_tailed_examples() {
        let n = 1_000_000u64;
        let p: f64 = 0.005;
        let r = (1.0 / n as f64).ln() / p.ln();
        let v = outlier_bound_light_tailed(n, p, r, 100.0, 0.01).unwrap();
        let oracle = 100.0 / -p.ln() * (1.0 + 100f64.ln().sqrt()).powi(2);
        assert!(rel_eq(v, oracle, 1e-9));
        assert!((v - 186.8).abs() < 0.05, "{v}");
    }

    #[test]
    fn total_alpha_regimes() {
        let base = params();
        let light = total_alpha(&base, TailModel::LightTailed, OutlierHorizon::Full).unwrap();
        let expected = bt_error_term(base.n - base.m, 255.0, 1.0, 0.004).unwrap()
            + outlier_bound_light_tailed(base.n, 0.005, 1.5, 155.0, 0.004).unwrap();
        assert!(rel_eq(light, expected, 1e-14));

        // r = 1 leaves the tail term dominant; r with p^r = 1/n makes it O(1)
        let mut flat = base;
        flat.r = 1.0;
        let tail_r1 = outlier_bound_light_tailed(flat.n, flat.p, 1.0, flat.x_hat_lambda_p, 0.004).unwrap();
        let tree_r1 = bt_error_term(flat.n - flat.m, flat.tau, 1.0, 0.004).unwrap();
        assert!(tail_r1 > tree_r1);
        let mut lifted = base;
        lifted.r = (1.0 / lifted.n as f64).ln() / lifted.p.ln();
        let tail = outlier_bound_light_tailed(lifted.n, lifted.p, lifted.r, lifted.x_hat_lambda_p, 0.004).unwrap();
        let tree = bt_error_term(lifted.n - lifted.m, lifted.effective_threshold(), 1.0, 0.004).unwrap();
        assert!(tail < 0.1 * tree);

        let worst = total_alpha(&base, TailModel::WorstCase, OutlierHorizon::AfterLag).unwrap();
        let expected = bt_error_term(base.n - base.m, 170.0, 1.0, 0.004).unwrap()
            + outlier_bound_worst_case(base.n - base.m, 0.005, 1440.0, 170.0, 0.004).unwrap();
        assert!(rel_eq(worst, expected, 1e-14));

        // p = 1/n collapses the worst-case tail term to (B - tau)(ln(1/beta) + 1)
        let tail = outlier_bound_worst_case(base.n, 1.0 / base.n as f64, 1440.0, 170.0, 0.004).unwrap();
        assert!(rel_eq(tail, 1270.0 * (250f64.ln() + 1.0), 1e-12));
    }

    #[test]
    fn total_alpha_is_monotone() {
        let base = params();
        let at = |f: &dyn Fn(&mut UtilityParams)| {
            let mut q = base;
            f(&mut q);
            total_alpha(&q, TailModel::LightTailed, OutlierHorizon::Full).unwrap()
        };
        let a0 = at(&|_| {});
        assert!(at(&|q| q.tau = 180.0) > a0);
        assert!(at(&|q| q.x_hat_lambda_p = 160.0) > a0);
        let tail = |r| outlier_bound_light_tailed(base.n, base.p, r, 155.0, 0.004).unwrap();
        assert!(tail(1.2) > tail(1.5) && tail(1.5) > tail(3.0));
    }

    #[test]
    fn light_tail_bound_below_worst_case_on_grid() {
        // With tau <= B - r x_p the exponential tail lies below the point mass at B.
        let n = 1_000_000u64;
        for &p in &[0.001, 0.003, 0.005] {
            for &x in &[50.0, 150.0, 300.0] {
                for &r in &[1.0, 1.5, 2.0] {
                    let tau = r * x;
                    let bound = 1440.0;
                    if tau > bound - x * r {
                        continue;
                    }
                    let light = outlier_bound_light_tailed(n, p, r, x, 0.004).unwrap();
                    let worst = outlier_bound_worst_case(n, p, bound, tau, 0.004).unwrap();
                    assert!(light <= worst, "p={p} x={x} r={r}");
                }
            }
        }
    }

    #[test]
    fn warnings_and_validation() {
        let mut q = params();
        assert!(q.warnings().is_empty());
        q.m = 1000;
        assert_eq!(q.warnings().len(), 1);
        q.n = 5000;
        assert_eq!(q.warnings().len(), 2);
        q.m = q.n;
        assert!(q.validate().is_err());
    }

    #[test]
    fn improvement_factor_examples() {
        assert_eq!(improvement_factor(3.0, 3.0).unwrap(), 1.0);
        assert!(improvement_factor(0.0, 1.0).is_err());
        assert!(improvement_factor(1.0, -1.0).is_err());
    }
}
