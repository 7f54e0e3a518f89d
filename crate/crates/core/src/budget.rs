//! Privacy and error-probability budgets, and the per-range spend ledger.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{check_positive, check_unit_open, Error, Result};

/// Relative slack for float round-off when comparing spent budget to capacity.
const BUDGET_SLACK: f64 = 1e-12;

/// Total `(epsilon, delta)` split into the threshold share `epsilon1`
/// and the first-segment-sum share `epsilon2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    epsilon1: f64,
    epsilon2: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, epsilon1: f64, delta: f64) -> Result<Self> {
        check_positive("epsilon", epsilon)?;
        check_positive("epsilon1", epsilon1)?;
        check_unit_open("delta", delta)?;
        let epsilon2 = epsilon - epsilon1;
        if epsilon2 <= 0.0 {
            return Err(Error::param("epsilon1", epsilon1, "must be strictly below epsilon"));
        }
        Ok(PrivacyBudget {
            epsilon,
            epsilon1,
            epsilon2,
            delta,
        })
    }

    /// `epsilon1 = fraction * epsilon`.
    pub fn from_fraction(epsilon: f64, fraction: f64, delta: f64) -> Result<Self> {
        check_unit_open("epsilon1_fraction", fraction)?;
        Self::new(epsilon, epsilon * fraction, delta)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn epsilon1(&self) -> f64 {
        self.epsilon1
    }
    pub fn epsilon2(&self) -> f64 {
        self.epsilon2
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// The five failure probabilities behind an `(alpha, beta)` utility claim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub beta_qt: f64,
    pub beta_lt: f64,
    pub beta_lap: f64,
    pub beta_out: f64,
    pub beta_rt: f64,
    pub beta_total: f64,
}

impl ErrorBudget {
    pub fn new(
        beta_total: f64,
        beta_qt: f64,
        beta_lt: f64,
        beta_lap: f64,
        beta_out: f64,
        beta_rt: f64,
    ) -> Result<Self> {
        check_unit_open("beta_total", beta_total)?;
        check_unit_open("beta_qt", beta_qt)?;
        check_unit_open("beta_lt", beta_lt)?;
        check_unit_open("beta_lap", beta_lap)?;
        check_unit_open("beta_out", beta_out)?;
        check_unit_open("beta_rt", beta_rt)?;
        let sum = beta_qt + beta_lt + beta_lap + beta_out + beta_rt;
        if sum > beta_total * (1.0 + BUDGET_SLACK) {
            return Err(Error::param("beta components", sum, "sum exceeds beta_total"));
        }
        Ok(ErrorBudget {
            beta_qt,
            beta_lt,
            beta_lap,
            beta_out,
            beta_rt,
            beta_total,
        })
    }

    /// Fractions in the order `[qt, lt, lap, out, rt]`.
    pub fn from_fractions(beta_total: f64, fractions: [f64; 5]) -> Result<Self> {
        let [qt, lt, lap, out, rt] = fractions.map(|f| f * beta_total);
        Self::new(beta_total, qt, lt, lap, out, rt)
    }

    pub fn equal_split(beta_total: f64) -> Result<Self> {
        Self::from_fractions(beta_total, [0.2; 5])
    }

    pub fn fractions(&self) -> [f64; 5] {
        [self.beta_qt, self.beta_lt, self.beta_lap, self.beta_out, self.beta_rt].map(|b| b / self.beta_total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub range: RangeInclusive<usize>,
    pub epsilon: f64,
    pub delta: f64,
    pub label: String,
}

/// Records `(epsilon, delta)` spent per observation range.
///
/// Charges to the same range compose sequentially and must stay within the
/// capacity; distinct ranges must be disjoint (parallel composition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    cap_epsilon: f64,
    cap_delta: f64,
    entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(cap_epsilon: f64, cap_delta: f64) -> Result<Self> {
        check_positive("epsilon", cap_epsilon)?;
        if !(0.0..1.0).contains(&cap_delta) {
            return Err(Error::param("delta", cap_delta, "must lie in [0, 1)"));
        }
        Ok(BudgetLedger {
            cap_epsilon,
            cap_delta,
            entries: Vec::new(),
        })
    }

    pub fn charge(
        &mut self,
        range: RangeInclusive<usize>,
        epsilon: f64,
        delta: f64,
        label: impl Into<String>,
    ) -> Result<()> {
        if *range.start() == 0 || range.start() > range.end() {
            return Err(Error::param(
                "range",
                *range.start() as f64,
                "must be a nonempty 1-based range",
            ));
        }
        if !(epsilon >= 0.0 && delta >= 0.0) {
            return Err(Error::param("epsilon", epsilon, "charges must be nonnegative"));
        }
        for entry in &self.entries {
            let overlaps = entry.range.start() <= range.end() && range.start() <= entry.range.end();
            if overlaps && entry.range != range {
                return Err(Error::RangeOverlap {
                    new: range,
                    existing: entry.range.clone(),
                });
            }
        }
        let (spent_eps, spent_delta) = self.totals(&range);
        let (eps, del) = (spent_eps + epsilon, spent_delta + delta);
        if eps > self.cap_epsilon * (1.0 + BUDGET_SLACK) || del > self.cap_delta * (1.0 + BUDGET_SLACK) {
            return Err(Error::BudgetExceeded {
                range,
                epsilon: eps,
                delta: del,
                cap_epsilon: self.cap_epsilon,
                cap_delta: self.cap_delta,
            });
        }
        self.entries.push(LedgerEntry {
            range,
            epsilon,
            delta,
            label: label.into(),
        });
        Ok(())
    }

    /// Total `(epsilon, delta)` charged to exactly this range.
    pub fn totals(&self, range: &RangeInclusive<usize>) -> (f64, f64) {
        self.entries
            .iter()
            .filter(|e| &e.range == range)
            .fold((0.0, 0.0), |(e, d), entry| (e + entry.epsilon, d + entry.delta))
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn capacity(&self) -> (f64, f64) {
        (self.cap_epsilon, self.cap_delta)
    }
}
