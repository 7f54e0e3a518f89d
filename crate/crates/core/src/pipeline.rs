//! The end-to-end mechanism: buffer `m` observations, release a threshold,
//! release the truncated first-segment sum, then run a BT tree on the
//! truncated remainder.

use serde::{Deserialize, Serialize};

use crate::bt::{BtConfig, BtState, NoiseMode};
use crate::budget::{BudgetLedger, PrivacyBudget};
use crate::error::{check_positive, Error, Result};
use crate::noise::{sample_laplace, Rng};
use crate::quantile::SortedPrefix;
use crate::stream::ExactSum;
use crate::threshold::{compute_kappa, release_threshold, ThresholdEstimate, ThresholdParams};

const THRESHOLD_STREAM: u64 = 0;
const FIRST_SEGMENT_STREAM: u64 = 1;
const TREE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub n: usize,
    pub m: usize,
    pub bound: f64,
    pub privacy: PrivacyBudget,
    pub threshold: ThresholdParams,
}

impl MechanismConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m >= self.n {
            return Err(Error::param("m", self.m as f64, "must satisfy 0 < m < n"));
        }
        check_positive("bound", self.bound)?;
        self.threshold.validate_for(self.m, &self.privacy)?;
        compute_kappa(&self.threshold).map(|_| ())
    }
}

/// Noise source for a run.
#[derive(Debug, Clone)]
pub enum PipelineNoise {
    Private(Rng),
    /// Diagnostic only: all noise terms are zero. NOT differentially private.
    Zero,
}

impl PipelineNoise {
    fn substream(&self, id: u64) -> Option<Rng> {
        match self {
            PipelineNoise::Private(rng) => Some(rng.substream(id)),
            PipelineNoise::Zero => None,
        }
    }

    fn tree_mode(&self) -> NoiseMode {
        match self.substream(TREE_STREAM) {
            Some(rng) => NoiseMode::Laplace(rng),
            None => NoiseMode::Zero,
        }
    }

    pub fn is_private(&self) -> bool {
        matches!(self, PipelineNoise::Private(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Buffering,
    Streaming,
    /// Plain BT over the whole stream with the bound as sensitivity.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    /// The configuration admits no threshold release.
    Infeasible,
    /// The released threshold reached the bound or was not positive.
    ThresholdAtBound,
}

#[derive(Debug, Clone)]
pub struct MechanismState {
    n: usize,
    m: usize,
    bound: f64,
    epsilon: f64,
    phase: Phase,
    seen: usize,
    buffer: Vec<f64>,
    threshold: Option<ThresholdEstimate>,
    /// Sensitivity used after step `m`: `tau_final`, or the bound after a fallback.
    sensitivity: Option<f64>,
    first_segment: ExactSum,
    first_segment_noise: f64,
    truncation_loss: ExactSum,
    bt: Option<BtState>,
    ledger: BudgetLedger,
    fallback: Option<FallbackReason>,
    config: Option<MechanismConfig>,
    noise: PipelineNoise,
}

impl MechanismState {
    /// Starts a run; an infeasible configuration starts in the baseline phase.
    pub fn new(config: MechanismConfig, noise: PipelineNoise) -> Result<Self> {
        if config.n == 0 {
            return Err(Error::param("n", 0.0, "must be positive"));
        }
        check_positive("bound", config.bound)?;
        match config.validate() {
            Ok(()) => {
                let privacy = config.privacy;
                Ok(MechanismState {
                    n: config.n,
                    m: config.m,
                    bound: config.bound,
                    epsilon: privacy.epsilon(),
                    phase: Phase::Buffering,
                    seen: 0,
                    buffer: Vec::with_capacity(config.m),
                    threshold: None,
                    sensitivity: None,
                    first_segment: ExactSum::ZERO,
                    first_segment_noise: 0.0,
                    truncation_loss: ExactSum::ZERO,
                    bt: None,
                    ledger: BudgetLedger::new(privacy.epsilon(), privacy.delta())?,
                    fallback: None,
                    config: Some(config),
                    noise,
                })
            }
            Err(Error::Infeasible(_)) | Err(Error::InvalidParameter { .. }) => {
                let mut state = Self::baseline(config.n, config.bound, config.privacy.epsilon(), noise)?;
                state.fallback = Some(FallbackReason::Infeasible);
                state.config = Some(config);
                Ok(state)
            }
            Err(e) => Err(e),
        }
    }

    /// Plain BT over `[1, n]` with sensitivity `bound` and privacy `epsilon`.
    pub fn baseline(n: usize, bound: f64, epsilon: f64, noise: PipelineNoise) -> Result<Self> {
        let cfg = BtConfig::new(n, bound, epsilon)?;
        let mut ledger = BudgetLedger::new(epsilon, 0.0)?;
        ledger.charge(1..=n, epsilon, 0.0, "baseline tree")?;
        Ok(MechanismState {
            n,
            m: 0,
            bound,
            epsilon,
            phase: Phase::Baseline,
            seen: 0,
            buffer: Vec::new(),
            threshold: None,
            sensitivity: Some(bound),
            first_segment: ExactSum::ZERO,
            first_segment_noise: 0.0,
            truncation_loss: ExactSum::ZERO,
            bt: Some(BtState::new(cfg, noise.tree_mode())),
            ledger,
            fallback: None,
            config: None,
            noise,
        })
    }

    /// Consumes one observation; returns the released sum from step `m` onward.
    pub fn ingest(&mut self, value: f64) -> Result<Option<f64>> {
        if self.seen == self.n {
            return Err(Error::SegmentFull(self.n));
        }
        if !(value >= 0.0 && value <= self.bound) {
            return Err(Error::ValueOutOfRange {
                value,
                bound: self.bound,
            });
        }
        match self.phase {
            Phase::Baseline => {
                let bt = self.bt.as_mut().expect("baseline keeps a tree");
                bt.ingest(value)?;
                self.seen += 1;
                Ok(Some(bt.query(self.seen)?))
            }
            Phase::Buffering => {
                self.buffer.push(value);
                self.seen += 1;
                if self.seen < self.m {
                    return Ok(None);
                }
                self.release_first_segment().map(Some)
            }
            Phase::Streaming => {
                let tau = self.sensitivity.expect("streaming has a sensitivity");
                let kept = value.min(tau);
                self.truncation_loss.add(value - kept);
                let bt = self.bt.as_mut().expect("streaming keeps a tree");
                bt.ingest(kept)?;
                self.seen += 1;
                let mut total = bt.query_exact(self.seen - self.m)?;
                total.merge(&self.first_segment);
                total.add(self.first_segment_noise);
                Ok(Some(total.value()))
            }
        }
    }

    fn release_first_segment(&mut self) -> Result<f64> {
        let config = self.config.expect("buffering keeps its config");
        let privacy = config.privacy;
        let prefix = SortedPrefix::new(&self.buffer, self.bound)?;
        let mut threshold_rng = self.noise.substream(THRESHOLD_STREAM);
        let estimate = release_threshold(&prefix, &config.threshold, &privacy, threshold_rng.as_mut())?;
        self.ledger
            .charge(1..=self.m, privacy.epsilon1(), privacy.delta(), "threshold")?;
        let tau = if estimate.tau_final > 0.0 && estimate.tau_final < self.bound {
            estimate.tau_final
        } else {
            self.fallback = Some(FallbackReason::ThresholdAtBound);
            self.bound
        };
        self.threshold = Some(estimate);
        self.sensitivity = Some(tau);

        let mut segment = ExactSum::ZERO;
        for &x in &self.buffer {
            let kept = x.min(tau);
            segment.add(kept);
            self.truncation_loss.add(x - kept);
        }
        self.first_segment = segment;
        self.first_segment_noise = match self.noise.substream(FIRST_SEGMENT_STREAM) {
            Some(mut rng) => sample_laplace(&mut rng, tau / privacy.epsilon2())?,
            None => 0.0,
        };
        self.ledger
            .charge(1..=self.m, privacy.epsilon2(), 0.0, "first segment sum")?;

        let cfg = BtConfig::new(self.n - self.m, tau, self.epsilon)?;
        self.bt = Some(BtState::new(cfg, self.noise.tree_mode()));
        self.ledger.charge(self.m + 1..=self.n, self.epsilon, 0.0, "tree")?;
        self.buffer = Vec::new();
        self.phase = Phase::Streaming;

        let mut total = self.first_segment;
        total.add(self.first_segment_noise);
        Ok(total.value())
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn observations_seen(&self) -> usize {
        self.seen
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Length of the time lag; 0 for a baseline run.
    pub fn time_lag(&self) -> usize {
        self.m
    }

    pub fn threshold(&self) -> Option<&ThresholdEstimate> {
        self.threshold.as_ref()
    }

    /// Truncation level in effect after step `m`.
    pub fn sensitivity(&self) -> Option<f64> {
        self.sensitivity
    }

    pub fn fallback(&self) -> Option<FallbackReason> {
        self.fallback
    }

    pub fn is_baseline(&self) -> bool {
        self.phase == Phase::Baseline || self.fallback.is_some()
    }

    pub fn is_private(&self) -> bool {
        self.noise.is_private()
    }

    /// Sum of `x - min(x, tau)` over all observations truncated so far.
    pub fn truncation_loss(&self) -> f64 {
        self.truncation_loss.value()
    }

    pub fn first_segment_noise(&self) -> f64 {
        self.first_segment_noise
    }

    /// Laplace scale of each tree node, once the tree exists.
    pub fn tree_node_scale(&self) -> Option<f64> {
        self.bt.as_ref().map(|bt| bt.config().node_scale())
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn config(&self) -> Option<&MechanismConfig> {
        self.config.as_ref()
    }
}

/// Runs a whole stream and returns every released sum, in order.
pub fn run_stream(state: &mut MechanismState, values: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        if let Some(sum) = state.ingest(v)? {
            out.push(sum);
        }
    }
    Ok(out)
}
