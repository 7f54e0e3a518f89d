//! Synthetic bounded streams and tail diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{check_positive, check_unit_open, Error, Result};
use crate::noise::{normal_quantile, Rng};
use crate::quantile::sorted_quantile;
use crate::stream::Stream;

/// Tolerance of [`light_tail_check`] on the CDF gap.
pub const DEFAULT_TAIL_TOLERANCE: f64 = 0.01;

/// Consecutive rejected draws after which generation gives up.
const MAX_REJECTIONS: usize = 1_000_000;

/// A distribution on `[0, bound]`. Draws above the bound are rejected and redrawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    TruncatedExponential { gamma: f64, bound: f64 },
    Lognormal { mu: f64, sigma: f64, bound: f64 },
    Pareto { x_min: f64, shape: f64, bound: f64 },
    PointMass { value: f64, bound: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub spec: DistributionSpec,
}

impl DistributionSpec {
    pub fn bound(&self) -> f64 {
        match self {
            Self::TruncatedExponential { bound, .. }
            | Self::Lognormal { bound, .. }
            | Self::Pareto { bound, .. }
            | Self::PointMass { bound, .. } => *bound,
            Self::Mixture { components } => components.iter().map(|c| c.spec.bound()).fold(0.0, f64::max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::TruncatedExponential { gamma, bound } => {
                check_positive("gamma", *gamma)?;
                check_positive("bound", *bound)
            }
            Self::Lognormal { mu, sigma, bound } => {
                if !mu.is_finite() {
                    return Err(Error::param("mu", *mu, "must be finite"));
                }
                check_positive("sigma", *sigma)?;
                check_positive("bound", *bound)
            }
            Self::Pareto { x_min, shape, bound } => {
                check_positive("x_min", *x_min)?;
                check_positive("shape", *shape)?;
                check_positive("bound", *bound)?;
                if x_min >= bound {
                    return Err(Error::param("x_min", *x_min, "must be below the bound"));
                }
                Ok(())
            }
            Self::PointMass { value, bound } => {
                check_positive("bound", *bound)?;
                if !(0.0..=*bound).contains(value) {
                    return Err(Error::ValueOutOfRange {
                        value: *value,
                        bound: *bound,
                    });
                }
                Ok(())
            }
            Self::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::param("components", 0.0, "mixture needs a component"));
                }
                let mut total = 0.0;
                for c in components {
                    check_positive("weight", c.weight)?;
                    c.spec.validate()?;
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::param("weights", total, "must sum to 1"));
                }
                Ok(())
            }
        }
    }

    /// One untruncated draw.
    fn raw_draw(&self, rng: &mut Rng) -> f64 {
        match self {
            Self::TruncatedExponential { gamma, .. } => -rng.uniform_open().ln() / gamma,
            Self::Lognormal { mu, sigma, .. } => (mu + sigma * normal_quantile(rng.uniform_open())).exp(),
            Self::Pareto { x_min, shape, .. } => x_min * rng.uniform_open().powf(-1.0 / shape),
            Self::PointMass { value, .. } => *value,
            Self::Mixture { components } => {
                let u = rng.uniform_open();
                let mut acc = 0.0;
                for c in components {
                    acc += c.weight;
                    if u < acc {
                        return c.spec.draw(rng).unwrap_or(f64::INFINITY);
                    }
                }
                components[components.len() - 1].spec.draw(rng).unwrap_or(f64::INFINITY)
            }
        }
    }

    /// One draw truncated to `[0, bound]` by rejection.
    pub fn draw(&self, rng: &mut Rng) -> Result<f64> {
        let bound = self.bound();
        for _ in 0..MAX_REJECTIONS {
            let x = self.raw_draw(rng);
            if x <= bound {
                return Ok(x);
            }
        }
        Err(Error::Infeasible(format!(
            "no draw fell inside [0, {bound}] after {MAX_REJECTIONS} attempts"
        )))
    }
}

/// `n` independent draws from `spec`.
pub fn generate(spec: &DistributionSpec, n: usize, rng: &mut Rng) -> Result<Stream> {
    if n == 0 {
        return Err(Error::param("n", 0.0, "must be positive"));
    }
    spec.validate()?;
    let values = (0..n).map(|_| spec.draw(rng)).collect::<Result<Vec<_>>>()?;
    Stream::new(values, spec.bound())
}

/// The `x` with `P[X > x] = q` for an exponential(`gamma`) truncated to `[0, bound]`.
pub fn truncated_exponential_quantile(gamma: f64, bound: f64, q: f64) -> Result<f64> {
    check_positive("gamma", gamma)?;
    check_positive("bound", bound)?;
    check_unit_open("q", q)?;
    let tail = (-gamma * bound).exp();
    Ok(-(q * (1.0 - tail) + tail).ln() / gamma)
}

/// Density of the truncated exponential at `x`.
pub fn truncated_exponential_density(gamma: f64, bound: f64, x: f64) -> f64 {
    if !(0.0..=bound).contains(&x) {
        return 0.0;
    }
    gamma * (-gamma * x).exp() / -(-gamma * bound).exp_m1()
}

/// Right-continuous empirical CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InsufficientData("empirical CDF of an empty sample".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        Ok(Ecdf { sorted })
    }

    /// Fraction of observations `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    /// Level-`q` upper quantile.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        sorted_quantile(&self.sorted, q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightTailReport {
    pub pass: bool,
    /// Largest `H(x) - ECDF(x)` over the grid, or 0 with no grid points.
    pub max_violation: f64,
    pub x_hat: f64,
    pub gamma: f64,
    pub grid_points: usize,
}

/// Compares the ECDF above `x_hat_p` against `H(x) = 1 - exp(-gamma x)` with
/// `gamma = -ln p / x_hat_p`, over every distinct sample value above `x_hat_p`.
pub fn light_tail_check(stream: &Stream, p: f64, tolerance: f64) -> Result<LightTailReport> {
    check_unit_open("p", p)?;
    if !(tolerance >= 0.0) {
        return Err(Error::param("tolerance", tolerance, "must be nonnegative"));
    }
    let ecdf = Ecdf::new(stream.values())?;
    let x_hat = ecdf.quantile(p)?;
    let gamma = -p.ln() / x_hat;
    let sorted = ecdf.sorted();
    let n = sorted.len() as f64;
    let start = sorted.partition_point(|&v| v <= x_hat);
    let mut max_violation: f64 = 0.0;
    let mut grid_points = 0;
    let mut i = start;
    while i < sorted.len() {
        let x = sorted[i];
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == x {
            j += 1;
        }
        let gap = -(-gamma * x).exp_m1() - j as f64 / n;
        max_violation = max_violation.max(gap);
        grid_points += 1;
        i = j;
    }
    Ok(LightTailReport {
        pass: max_violation <= tolerance,
        max_violation,
        x_hat,
        gamma,
        grid_points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRow {
    pub r: f64,
    /// Empirical level-`p^r` quantile.
    pub x_hat_pr: f64,
    /// `r` times the empirical level-`p` quantile.
    pub r_x_hat_p: f64,
    /// `r_x_hat_p / x_hat_pr`; at least 1 when linear extrapolation is safe.
    pub ratio: f64,
}

/// Checks `r * x_hat_p >= x_hat_{p^r}` across `r_grid`.
pub fn quantile_extrapolation_check(stream: &Stream, p: f64, r_grid: &[f64]) -> Result<Vec<ExtrapolationRow>> {
    check_unit_open("p", p)?;
    let ecdf = Ecdf::new(stream.values())?;
    let n = stream.len() as f64;
    let x_hat_p = ecdf.quantile(p)?;
    r_grid
        .iter()
        .map(|&r| {
            if !(r >= 1.0) {
                return Err(Error::param("r", r, "must be at least 1"));
            }
            let level = p.powf(r);
            if level * n < 10.0 {
                return Err(Error::InsufficientData(format!(
                    "level p^r = {level:e} leaves fewer than 10 of {n} observations in the tail"
                )));
            }
            let x_hat_pr = ecdf.quantile(level)?;
            let r_x_hat_p = r * x_hat_p;
            Ok(ExtrapolationRow {
                r,
                x_hat_pr,
                r_x_hat_p,
                ratio: r_x_hat_p / x_hat_pr,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::Rng;
    use proptest::prelude::*;

    fn exp_spec(gamma: f64) -> DistributionSpec {
        DistributionSpec::TruncatedExponential { gamma, bound: 1440.0 }
    }

    #[test]
    fn point_mass_mixture_is_constant() {
        let spec = DistributionSpec::Mixture {
            components: vec![MixtureComponent {
                weight: 1.0,
                spec: DistributionSpec::PointMass {
                    value: 7.5,
                    bound: 10.0,
                },
            }],
        };
        let s = generate(&spec, 100, &mut Rng::new(1)).unwrap();
        assert!(s.values().iter().all(|&v| v == 7.5));
        assert_eq!(s.bound(), 10.0);
    }

    #[test]
    fn exponential_quantile_matches_closed_form() {
        let x = truncated_exponential_quantile(0.05, 1440.0, 0.005).unwrap();
        assert!((x - 0.005f64.ln() / -0.05).abs() < 1e-9);
        assert!((x - 105.97).abs() < 0.01);
        let s = generate(&exp_spec(0.05), 1_000_000, &mut Rng::new(42)).unwrap();
        let q = Ecdf::new(s.values()).unwrap().quantile(0.005).unwrap();
        assert!((q / x - 1.0).abs() < 0.02, "{q} vs {x}");
    }

    #[test]
    fn generation_is_replayable_and_bounded() {
        let spec = DistributionSpec::Mixture {
            components: vec![
                MixtureComponent {
                    weight: 0.7,
                    spec: exp_spec(0.02),
                },
                MixtureComponent {
                    weight: 0.3,
                    spec: DistributionSpec::Pareto {
                        x_min: 5.0,
                        shape: 1.1,
                        bound: 1440.0,
                    },
                },
            ],
        };
        let a = generate(&spec, 10_000, &mut Rng::new(3)).unwrap();
        let b = generate(&spec, 10_000, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|&v| (0.0..=1440.0).contains(&v)));
        // rejection leaves no atom at the bound
        assert!(a.values().iter().all(|&v| v < 1440.0));
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            DistributionSpec::TruncatedExponential { gamma: 0.0, bound: 1.0 },
            DistributionSpec::Pareto {
                x_min: 5.0,
                shape: 1.0,
                bound: 4.0,
            },
            DistributionSpec::PointMass { value: 2.0, bound: 1.0 },
            DistributionSpec::Mixture { components: vec![] },
            DistributionSpec::Mixture {
                components: vec![MixtureComponent {
                    weight: 0.5,
                    spec: exp_spec(1.0),
                }],
            },
        ];
        for spec in bad {
            assert!(generate(&spec, 10, &mut Rng::new(0)).is_err(), "{spec:?}");
        }
        assert!(generate(&exp_spec(1.0), 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn truncated_density_integrates_to_one() {
        let (gamma, bound) = (0.01, 200.0);
        let h = 0.01;
        let total: f64 = (0..20_000)
            .map(|i| truncated_exponential_density(gamma, bound, (i as f64 + 0.5) * h) * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn light_tail_on_exponential_passes() {
        let s = generate(&exp_spec(0.035), 200_000, &mut Rng::new(11)).unwrap();
        for &p in &[0.001, 0.005, 0.02, 0.05] {
            let rep = light_tail_check(&s, p, DEFAULT_TAIL_TOLERANCE).unwrap();
            assert!(rep.pass, "p={p}: {rep:?}");
            assert!(rep.max_violation < 0.005);
        }
    }

    #[test]
    fn light_tail_on_pareto_fails() {
        let spec = DistributionSpec::Pareto {
            x_min: 1.0,
            shape: 1.1,
            bound: 1e6,
        };
        let s = generate(&spec, 100_000, &mut Rng::new(5)).unwrap();
        let p: f64 = 0.1;
        let rep = light_tail_check(&s, p, DEFAULT_TAIL_TOLERANCE).unwrap();
        assert!(!rep.pass, "{rep:?}");
        // Closed-form gap at 2 x_p: Pareto tail p 2^-shape against exponential tail p^2.
        let gap = p * 2f64.powf(-1.1) - p * p;
        assert!(rep.max_violation >= 0.8 * gap, "{} vs {gap}", rep.max_violation);
    }

    #[test]
    fn light_tail_constant_is_vacuous() {
        let s = Stream::new(vec![3.0; 1000], 10.0).unwrap();
        let rep = light_tail_check(&s, 0.01, DEFAULT_TAIL_TOLERANCE).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.grid_points, 0);
        assert_eq!(rep.max_violation, 0.0);
    }

    #[test]
    fn extrapolation_exponential_ratio_near_one() {
        let s = generate(&exp_spec(0.035), 1_000_000, &mut Rng::new(8)).unwrap();
        let rows = quantile_extrapolation_check(&s, 0.005, &[1.0, 1.2, 1.5, 1.8]).unwrap();
        for row in rows {
            assert!((row.ratio - 1.0).abs() < 0.05, "{row:?}");
        }
        assert!(quantile_extrapolation_check(&s, 0.005, &[3.0]).is_err());
    }

    #[test]
    fn extrapolation_thin_tail_ratio_at_least_one() {
        // A small log-scale spread gives a tail much lighter than exponential.
        let spec = DistributionSpec::Lognormal {
            mu: 3.0,
            sigma: 0.25,
            bound: 1440.0,
        };
        let s = generate(&spec, 1_000_000, &mut Rng::new(9)).unwrap();
        for row in quantile_extrapolation_check(&s, 0.005, &[1.0, 1.25, 1.5, 2.0]).unwrap() {
            assert!(row.ratio >= 1.0 - 1e-12, "{row:?}");
        }
    }

    #[test]
    fn extrapolation_large_p_can_fail_on_lognormal() {
        let spec = DistributionSpec::Lognormal {
            mu: 0.0,
            sigma: 1.5,
            bound: 1e6,
        };
        let s = generate(&spec, 1_000_000, &mut Rng::new(10)).unwrap();
        let rows = quantile_extrapolation_check(&s, 0.1, &[1.5, 2.0, 3.0]).unwrap();
        assert!(rows.iter().any(|row| row.ratio < 1.0), "{rows:?}");
    }

    proptest! {
        #[test]
        fn ecdf_is_monotone_and_reaches_one(values in prop::collection::vec(0.0f64..100.0, 1..200), probe in prop::collection::vec(-1.0f64..101.0, 1..20)) {
            let ecdf = Ecdf::new(&values).unwrap();
            let mut probe = probe;
            probe.sort_unstable_by(f64::total_cmp);
            let at: Vec<f64> = probe.iter().map(|&x| ecdf.eval(x)).collect();
            prop_assert!(at.windows(2).all(|w| w[0] <= w[1]));
            let max = values.iter().copied().fold(f64::MIN, f64::max);
            prop_assert_eq!(ecdf.eval(max), 1.0);
            for &v in &values {
                // right-continuous: the jump at v is included at v
                prop_assert!(ecdf.eval(v) >= ecdf.eval(v - 1e-9));
                prop_assert!(ecdf.eval(v) > 0.0);
            }
        }
    }
}
