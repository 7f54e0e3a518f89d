//! Utility-parameter optimization and the time-lag heuristics.
//!
//! The optimizer minimizes the light-tailed total error over
//! `(p, r, eps1 / eps, beta fractions)`. `lambda` is not a free variable: for a
//! given `p` and `beta_qt` it is set to the largest level whose underestimation
//! probability `g(lambda, p, m)` stays within `beta_qt`.

use serde::{Deserialize, Serialize};

use crate::budget::{ErrorBudget, PrivacyBudget};
use crate::datagen::{truncated_exponential_density, truncated_exponential_quantile};
use crate::errmodel::{bt_error_term, outlier_bound_light_tailed, OutlierHorizon, UtilityParams};
use crate::error::{check_positive, check_unit_open, Error, Result};
use crate::noise::{inverse_cdf, NoiseKind};
use crate::quantile::{binomial_cdf, empirical_quantile, max_count_within, smooth_sensitivity, SortedPrefix};
use crate::threshold::{compute_kappa, kappa_from, smoothing_b, tau_upper_bound, ThresholdParams, DEFAULT_P_MAX};

/// Divisor of the bound in the sensitivity target of criterion 2.
pub const DEFAULT_TARGET_DIVISOR: f64 = 10.0;

const GRID_POINTS: usize = 32;
const DIMS: usize = 7;
const LOGIT_RANGE: f64 = 6.0;
const R_MAX: f64 = 10.0;
const FRACTION_RANGE: (f64, f64) = (0.05, 0.95);
const P_MIN_RATIO: f64 = 0.05;

/// Source of the plug-in quantile and smooth-sensitivity scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataModel {
    /// Exponential(`gamma`) truncated to `[0, bound]`.
    ExponentialTail { gamma: f64, bound: f64 },
    /// A representative sample; its first `m` values play the buffered prefix.
    EmpiricalSample { values: Vec<f64> },
}

/// A [`DataModel`] prepared for one `m`.
#[derive(Debug, Clone)]
enum PreparedModel {
    Exponential { gamma: f64, bound: f64, m: usize },
    Empirical(SortedPrefix),
}

impl PreparedModel {
    fn new(model: &DataModel, m: usize, bound: f64) -> Result<Self> {
        match model {
            DataModel::ExponentialTail {
                gamma,
                bound: tail_bound,
            } => {
                check_positive("gamma", *gamma)?;
                check_positive("bound", *tail_bound)?;
                Ok(PreparedModel::Exponential {
                    gamma: *gamma,
                    bound: *tail_bound,
                    m,
                })
            }
            DataModel::EmpiricalSample { values } => {
                if values.len() < m {
                    return Err(Error::InsufficientData(format!(
                        "sample has {} values, the prefix needs m = {m}",
                        values.len()
                    )));
                }
                Ok(PreparedModel::Empirical(SortedPrefix::new(&values[..m], bound)?))
            }
        }
    }

    /// Plug-in `(x_hat, SS)` for level `q` and smoothing `b`.
    fn quantile_and_sensitivity(&self, q: f64, b: f64) -> Result<(f64, f64)> {
        match self {
            PreparedModel::Exponential { gamma, bound, m } => {
                let x = truncated_exponential_quantile(*gamma, *bound, q)?;
                // Order statistics near x are spaced about 1 / (m f(x)) apart.
                let spacing = 1.0 / (*m as f64 * truncated_exponential_density(*gamma, *bound, x));
                let mut best: f64 = 0.0;
                let mut k = 0usize;
                loop {
                    let decay = (-b * k as f64).exp();
                    if decay * bound <= best {
                        break;
                    }
                    let ls = ((k + 1) as f64 * spacing).min(*bound);
                    best = best.max(decay * ls);
                    k += 1;
                }
                Ok((x, best))
            }
            PreparedModel::Empirical(prefix) => {
                let qr = empirical_quantile(prefix, q)?;
                Ok((qr.value, smooth_sensitivity(prefix, qr.rank, b)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationProblem {
    pub n: u64,
    pub m: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub beta_total: f64,
    pub bound: f64,
    pub p_max: f64,
    pub data_model: DataModel,
    #[serde(default)]
    pub horizon: OutlierHorizon,
    /// Drops the outlier term from the objective.
    #[serde(default)]
    pub laplace_only: bool,
}

impl OptimizationProblem {
    pub fn new(n: u64, m: u64, bound: f64, data_model: DataModel) -> Self {
        OptimizationProblem {
            n,
            m,
            epsilon: 1.0,
            delta: 2f64.powi(-20),
            beta_total: 0.02,
            bound,
            p_max: DEFAULT_P_MAX,
            data_model,
            horizon: OutlierHorizon::Full,
            laplace_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m >= self.n {
            return Err(Error::param("m", self.m as f64, "must satisfy 0 < m < n"));
        }
        check_positive("epsilon", self.epsilon)?;
        check_unit_open("delta", self.delta)?;
        check_unit_open("beta_total", self.beta_total)?;
        check_positive("bound", self.bound)?;
        check_unit_open("p_max", self.p_max)
    }

    /// Error of plain BT over the whole stream with the whole budget.
    pub fn baseline_alpha(&self) -> Result<f64> {
        bt_error_term(self.n, self.bound, self.epsilon, self.beta_total)
    }
}

/// One row in the layout of the published parameter tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub m: u64,
    pub improvement_factor: f64,
    pub r: f64,
    pub lambda: f64,
    pub p: f64,
    pub epsilon1_fraction: f64,
    /// `beta_qt, beta_lt, beta_lap, beta_out, beta_rt` as fractions of the total.
    pub beta_fractions: [f64; 5],
    pub fallback: bool,
}

impl TableRow {
    /// The row of a run that releases with plain BT.
    pub fn fallback(m: u64, p_max: f64) -> Self {
        TableRow {
            m,
            improvement_factor: 1.0,
            r: 1.0,
            lambda: 1.0,
            p: p_max,
            epsilon1_fraction: 0.0,
            beta_fractions: [0.0, 0.0, 1.0, 0.0, 0.0],
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedParameters {
    pub utility: UtilityParams,
    pub threshold: ThresholdParams,
    pub privacy: PrivacyBudget,
    pub alpha: f64,
    pub baseline_alpha: f64,
    pub improvement_factor: f64,
    pub kappa: f64,
    pub smooth_sensitivity: f64,
    pub row: TableRow,
}

/// A point of the search box mapped to mechanism parameters.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    p: f64,
    r: f64,
    epsilon1_fraction: f64,
    fractions: [f64; 5],
}

impl Candidate {
    /// Maps `u` in `[0, 1]^DIMS` to the parameter box.
    fn from_unit(u: &[f64; DIMS], p_max: f64) -> Self {
        let lerp = |t: f64, lo: f64, hi: f64| lo + t * (hi - lo);
        let mut logits = [0.0; 5];
        for (j, logit) in logits.iter_mut().take(4).enumerate() {
            *logit = lerp(u[3 + j], -LOGIT_RANGE, LOGIT_RANGE);
        }
        let top = logits.iter().copied().fold(f64::MIN, f64::max);
        let weights = logits.map(|l| (l - top).exp());
        let total: f64 = weights.iter().sum();
        Candidate {
            p: lerp(u[0], P_MIN_RATIO * p_max, p_max),
            r: lerp(u[1], 1.0, R_MAX),
            epsilon1_fraction: lerp(u[2], FRACTION_RANGE.0, FRACTION_RANGE.1),
            fractions: weights.map(|w| w / total),
        }
    }
}

struct Evaluation {
    alpha: f64,
    result: OptimizedParameters,
}

struct Objective<'a> {
    problem: &'a OptimizationProblem,
    model: PreparedModel,
    baseline: f64,
}

impl Objective<'_> {
    fn value(&self, u: &[f64; DIMS]) -> f64 {
        self.evaluate(u).map_or(f64::INFINITY, |e| e.alpha)
    }

    fn evaluate(&self, u: &[f64; DIMS]) -> Option<Evaluation> {
        evaluate_candidate(
            self.problem,
            &self.model,
            self.baseline,
            Candidate::from_unit(u, self.problem.p_max),
        )
        .ok()
    }
}

fn evaluate_candidate(
    problem: &OptimizationProblem,
    model: &PreparedModel,
    baseline: f64,
    c: Candidate,
) -> Result<Evaluation> {
    let errors = ErrorBudget::from_fractions(problem.beta_total, c.fractions)?;
    let m = problem.m;
    let k = max_count_within(m, c.p, errors.beta_qt)
        .filter(|&k| k >= 1)
        .ok_or_else(|| Error::Infeasible("no quantile level meets beta_qt".into()))?;
    let lambda = ((k as f64 + 0.5) / (c.p * m as f64)).min(1.0);
    let privacy = PrivacyBudget::from_fraction(problem.epsilon, c.epsilon1_fraction, problem.delta)?;
    let threshold = ThresholdParams::calibrated(
        c.p,
        lambda,
        c.r,
        errors.beta_lt,
        errors.beta_rt,
        NoiseKind::Laplace,
        &privacy,
    )
    .with_p_max(problem.p_max);
    threshold.validate_for(m as usize, &privacy)?;
    let kappa = compute_kappa(&threshold)?;
    let (x_hat, ss) = model.quantile_and_sensitivity(threshold.level(), threshold.b)?;
    if !(x_hat > 0.0) {
        return Err(Error::Infeasible("plug-in quantile is zero".into()));
    }
    let tau = tau_upper_bound(x_hat, ss, kappa, &threshold)?;
    let utility = UtilityParams {
        n: problem.n,
        m,
        epsilon: problem.epsilon,
        tau,
        r: c.r,
        p: c.p,
        x_hat_lambda_p: x_hat,
        bound: problem.bound,
        error_budget: errors,
    };
    utility.validate()?;
    let laplace = bt_error_term(
        problem.n - m,
        utility.effective_threshold(),
        problem.epsilon,
        errors.beta_lap,
    )?;
    let alpha = if problem.laplace_only {
        laplace
    } else {
        let outlier_n = match problem.horizon {
            OutlierHorizon::Full => problem.n,
            OutlierHorizon::AfterLag => problem.n - m,
        };
        laplace + outlier_bound_light_tailed(outlier_n, c.p, c.r, x_hat, errors.beta_out)?
    };
    if !alpha.is_finite() {
        return Err(Error::Infeasible("objective is not finite".into()));
    }
    let improvement_factor = baseline / alpha;
    Ok(Evaluation {
        alpha,
        result: OptimizedParameters {
            utility,
            threshold,
            privacy,
            alpha,
            baseline_alpha: baseline,
            improvement_factor,
            kappa,
            smooth_sensitivity: ss,
            row: TableRow {
                m,
                improvement_factor,
                r: c.r,
                lambda,
                p: c.p,
                epsilon1_fraction: c.epsilon1_fraction,
                beta_fractions: c.fractions,
                fallback: false,
            },
        },
    })
}

/// Deterministic Latin grid: coordinate `j` of point `i` is `(i a_j + c_j) mod 32`.
fn latin_grid() -> Vec<[f64; DIMS]> {
    const MULT: [usize; DIMS] = [1, 5, 9, 13, 21, 25, 29];
    const SHIFT: [usize; DIMS] = [0, 3, 7, 11, 17, 19, 23];
    (0..GRID_POINTS)
        .map(|i| {
            std::array::from_fn(|j| {
                let cell = (i * MULT[j] + SHIFT[j]) % GRID_POINTS;
                (cell as f64 + 0.5) / GRID_POINTS as f64
            })
        })
        .collect()
}

fn project(mut u: [f64; DIMS]) -> [f64; DIMS] {
    for x in &mut u {
        *x = x.clamp(0.0, 1.0);
    }
    u
}

/// Nelder-Mead on the unit box with every trial point projected into it.
fn nelder_mead<F: Fn(&[f64; DIMS]) -> f64>(
    f: &F,
    start: [f64; DIMS],
    step: f64,
    max_evals: usize,
) -> ([f64; DIMS], f64) {
    let mut simplex: Vec<([f64; DIMS], f64)> = Vec::with_capacity(DIMS + 1);
    simplex.push((start, f(&start)));
    for j in 0..DIMS {
        let mut x = start;
        x[j] += if x[j] + step <= 1.0 { step } else { -step };
        let x = project(x);
        simplex.push((x, f(&x)));
    }
    let mut evals = DIMS + 1;
    let combine = |a: &[f64; DIMS], b: &[f64; DIMS], t: f64| -> [f64; DIMS] {
        project(std::array::from_fn(|j| a[j] + t * (b[j] - a[j])))
    };
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[DIMS].1);
        if best.is_finite() && (worst - best).abs() <= 1e-12 * best.abs().max(1e-300) {
            break;
        }
        let centroid: [f64; DIMS] =
            std::array::from_fn(|j| simplex[..DIMS].iter().map(|s| s.0[j]).sum::<f64>() / DIMS as f64);
        let worst_x = simplex[DIMS].0;
        let reflected = combine(&centroid, &worst_x, -1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = combine(&centroid, &worst_x, -2.0);
            let fe = f(&expanded);
            evals += 1;
            simplex[DIMS] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[DIMS - 1].1 {
            simplex[DIMS] = (reflected, fr);
        } else {
            let (target, ft) = if fr < simplex[DIMS].1 {
                (reflected, fr)
            } else {
                (worst_x, simplex[DIMS].1)
            };
            let contracted = combine(&centroid, &target, 0.5);
            let fc = f(&contracted);
            evals += 1;
            if fc < ft {
                simplex[DIMS] = (contracted, fc);
            } else {
                let anchor = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    let x = combine(&anchor, &s.0, 0.5);
                    *s = (x, f(&x));
                }
                evals += DIMS;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Coordinate search with halving steps.
fn pattern_polish<F: Fn(&[f64; DIMS]) -> f64>(f: &F, mut x: [f64; DIMS], mut fx: f64) -> ([f64; DIMS], f64) {
    let mut step = 0.05;
    while step > 1e-7 {
        let mut improved = false;
        for j in 0..DIMS {
            for dir in [1.0, -1.0] {
                let mut y = x;
                y[j] += dir * step;
                let y = project(y);
                let fy = f(&y);
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Minimizes the light-tailed total error from a fixed 32-point multi-start.
pub fn optimize_utility(problem: &OptimizationProblem) -> Result<OptimizedParameters> {
    problem.validate()?;
    let objective = Objective {
        problem,
        model: PreparedModel::new(&problem.data_model, problem.m as usize, problem.bound)?,
        baseline: problem.baseline_alpha()?,
    };
    let f = |u: &[f64; DIMS]| objective.value(u);
    let starts: Vec<([f64; DIMS], f64)> = latin_grid()
        .into_iter()
        .map(|u| (u, f(&u)))
        .filter(|(_, v)| v.is_finite())
        .collect();
    if starts.is_empty() {
        return Err(Error::Infeasible(format!(
            "no start point is feasible for m = {}",
            problem.m
        )));
    }
    let mut best: Option<([f64; DIMS], f64)> = None;
    for (start, _) in starts {
        let (x, _) = nelder_mead(&f, start, 0.1, 600);
        let (x, fx) = nelder_mead(&f, x, 0.02, 300);
        if best.is_none_or(|(_, b)| fx < b) {
            best = Some((x, fx));
        }
    }
    let (x, fx) = best.expect("at least one feasible start");
    let (x, _) = pattern_polish(&f, x, fx);
    let eval = objective
        .evaluate(&x)
        .ok_or_else(|| Error::Infeasible("optimum left the feasible set".into()))?;
    assert_constraints(&eval.result, problem);
    Ok(eval.result)
}

fn assert_constraints(res: &OptimizedParameters, problem: &OptimizationProblem) {
    let t = &res.threshold;
    let fractions = res.row.beta_fractions;
    assert!(t.p > 0.0 && t.p <= problem.p_max);
    assert!(t.lambda <= 1.0 && t.lambda > 1.0 / (t.p * problem.m as f64));
    assert!(t.r >= 1.0);
    assert!(res.kappa > 0.0);
    assert!(fractions.iter().all(|&f| f > 0.0) && fractions.iter().sum::<f64>() <= 1.0 + 1e-12);
}

/// Optimized row, or the fallback row when the mechanism cannot beat plain BT.
pub fn table_row(problem: &OptimizationProblem) -> Result<(TableRow, Option<OptimizedParameters>)> {
    match optimize_utility(problem) {
        Ok(res) if res.improvement_factor > 1.0 => Ok((res.row, Some(res))),
        Ok(_) | Err(Error::Infeasible(_)) | Err(Error::InvalidParameter { .. }) => {
            Ok((TableRow::fallback(problem.m, problem.p_max), None))
        }
        Err(e) => Err(e),
    }
}

/// Evaluates the objective at explicit parameters; used to audit the optimizer.
pub fn objective_at(
    problem: &OptimizationProblem,
    p: f64,
    r: f64,
    epsilon1_fraction: f64,
    beta_fractions: [f64; 5],
) -> Result<OptimizedParameters> {
    let model = PreparedModel::new(&problem.data_model, problem.m as usize, problem.bound)?;
    let candidate = Candidate {
        p,
        r,
        epsilon1_fraction,
        fractions: beta_fractions,
    };
    evaluate_candidate(problem, &model, problem.baseline_alpha()?, candidate).map(|e| e.result)
}

/// Smallest `m` (doubling then bisection) with `P[Bin(m, p_max) <= floor(m p_max / 2)] < beta`.
pub fn heuristic_m_criterion1(p_max: f64, beta: f64) -> Result<u64> {
    check_unit_open("p_max", p_max)?;
    check_unit_open("beta", beta)?;
    let passes = |m: u64| binomial_cdf(m, p_max, (0.5 * p_max * m as f64).floor() as u64) < beta;
    if passes(1) {
        return Ok(1);
    }
    let mut hi = 2u64;
    while !passes(hi) {
        hi = hi
            .checked_mul(2)
            .ok_or_else(|| Error::Infeasible("criterion 1 diverged".into()))?;
    }
    let mut lo = hi / 2;
    // invariant: !passes(lo), passes(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if passes(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criterion2 {
    pub m: u64,
    pub kappa: f64,
    pub a: f64,
    pub b: f64,
    pub offset: f64,
    /// The unrounded lower bound on `m`.
    pub m_real: f64,
}

/// Smallest integer `m` above `2 D kappa (-ln delta)^1.5 e^-1 G^-1(1 - beta) / (-eps^2 p ln p)`,
/// with `a = eps / sqrt(-ln delta)` and `b = min(1, eps / (-2 ln delta))`.
pub fn heuristic_m_criterion2(epsilon: f64, delta: f64, beta: f64, p_max: f64, divisor: f64) -> Result<Criterion2> {
    check_positive("epsilon", epsilon)?;
    check_unit_open("delta", delta)?;
    check_unit_open("beta", beta)?;
    check_unit_open("p_max", p_max)?;
    check_positive("divisor", divisor)?;
    let l = -delta.ln();
    if l < 1e-300 {
        return Err(Error::param("delta", delta, "too close to 1"));
    }
    let a = epsilon / l.sqrt();
    let b = smoothing_b(epsilon, delta);
    let offset = inverse_cdf(NoiseKind::Laplace, 1.0 - beta)?;
    let kappa = kappa_from(a, b, offset)?;
    let m_real =
        2.0 * divisor * kappa * l.powf(1.5) * (-1f64).exp() * offset / (-epsilon * epsilon * p_max * p_max.ln());
    Ok(Criterion2 {
        m: m_real.floor() as u64 + 1,
        kappa,
        a,
        b,
        offset,
        m_real,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicM {
    pub criterion1: u64,
    pub criterion2: u64,
    pub recommended: u64,
    pub kappa: f64,
}

pub fn recommended_m(epsilon: f64, delta: f64, beta: f64, p_max: f64, divisor: f64) -> Result<HeuristicM> {
    let criterion1 = heuristic_m_criterion1(p_max, beta)?;
    let c2 = heuristic_m_criterion2(epsilon, delta, beta, p_max, divisor)?;
    Ok(HeuristicM {
        criterion1,
        criterion2: c2.m,
        recommended: criterion1.max(c2.m),
        kappa: c2.kappa,
    })
}
