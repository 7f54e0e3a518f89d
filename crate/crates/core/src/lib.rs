//! Differentially private continual release of prefix sums over bounded
//! streams, with a privately released data-adaptive truncation threshold.
//!
//! The mechanism buffers the first `m` observations, releases a threshold from
//! a smooth-sensitivity quantile estimate, and then runs a binary-tree counter
//! over the truncated remainder with noise scaled to the threshold instead of
//! the worst-case bound.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod bt;
pub mod budget;
pub mod datagen;
pub mod errmodel;
pub mod error;
pub mod experiment;
pub mod noise;
pub mod pipeline;
pub mod quantile;
pub mod stream;
pub mod threshold;
pub mod tuning;

pub use bt::{dyadic_decompose, BtConfig, BtState, Interval, NoiseMode};
pub use budget::{BudgetLedger, ErrorBudget, LedgerEntry, PrivacyBudget};
pub use datagen::{generate, DistributionSpec, MixtureComponent};
pub use errmodel::{OutlierHorizon, TailModel, UtilityParams};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Summary, TrialReport};
pub use noise::{NoiseKind, Rng};
pub use pipeline::{MechanismConfig, MechanismState, PipelineNoise};
pub use quantile::SortedPrefix;
pub use stream::{ExactSum, Stream};
pub use threshold::{ThresholdEstimate, ThresholdParams};
pub use tuning::{DataModel, OptimizationProblem, TableRow};
