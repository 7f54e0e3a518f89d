//! Binary-tree mechanism for continual release of prefix sums.
//!
//! The tree over `[1, 2^L]` is never materialized. [`BtState`] keeps only the
//! maximal complete dyadic blocks covering `[1, seen]` (one per set bit of
//! `seen`), merging them like a binary counter as observations arrive. A
//! node's Laplace noise is drawn the first time the node takes part in a
//! release and is frozen from then on.

use serde::{Deserialize, Serialize};

use crate::error::{check_positive, Error, Result};
use crate::noise::{sample_laplace, Rng};
use crate::stream::ExactSum;

/// Closed 1-based index interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

/// Dyadic nodes of the complete tree over `[1, 2^ceil(log2 n)]` whose union
/// is `[1, i]`, largest first.
pub fn dyadic_decompose(i: usize, n: usize) -> Result<Vec<Interval>> {
    if i == 0 || i > n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    let mut out = Vec::with_capacity(i.count_ones() as usize);
    let mut start = 1;
    for level in (0..usize::BITS).rev() {
        let width = 1usize << level;
        if i & width != 0 {
            out.push(Interval {
                start,
                end: start + width - 1,
            });
            start += width;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtConfig {
    segment_length: usize,
    sensitivity_bound: f64,
    epsilon: f64,
}

impl BtConfig {
    pub fn new(segment_length: usize, sensitivity_bound: f64, epsilon: f64) -> Result<Self> {
        if segment_length == 0 {
            return Err(Error::param("segment_length", 0.0, "must be positive"));
        }
        check_positive("sensitivity_bound", sensitivity_bound)?;
        check_positive("epsilon", epsilon)?;
        Ok(BtConfig {
            segment_length,
            sensitivity_bound,
            epsilon,
        })
    }

    pub fn segment_length(&self) -> usize {
        self.segment_length
    }

    pub fn sensitivity_bound(&self) -> f64 {
        self.sensitivity_bound
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of leaves of the complete tree (segment length rounded up to a power of two).
    pub fn capacity(&self) -> usize {
        self.segment_length.next_power_of_two()
    }

    /// `log2(capacity)`, with a single-leaf tree counted as one level.
    pub fn noise_levels(&self) -> u32 {
        self.capacity().trailing_zeros().max(1)
    }

    /// Laplace scale of every node: `bound * levels / epsilon`.
    pub fn node_scale(&self) -> f64 {
        self.sensitivity_bound * f64::from(self.noise_levels()) / self.epsilon
    }
}

/// Source of per-node noise.
#[derive(Debug, Clone)]
pub enum NoiseMode {
    Laplace(Rng),
    /// Diagnostic only: every node noise is exactly zero. NOT differentially private.
    Zero,
}

impl NoiseMode {
    pub fn is_private(&self) -> bool {
        matches!(self, NoiseMode::Laplace(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeNoise {
    pub interval: Interval,
    pub noise: f64,
}

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    sum: ExactSum,
    noise: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BtState {
    config: BtConfig,
    seen: usize,
    /// `nodes[l]` is the complete block of width `2^l`, if bit `l` of `seen` is set.
    nodes: Vec<Option<Node>>,
    noise: NoiseMode,
    noise_log: Option<Vec<NodeNoise>>,
}

impl BtState {
    pub fn new(config: BtConfig, noise: NoiseMode) -> Self {
        let depth = config.capacity().trailing_zeros() as usize + 1;
        BtState {
            config,
            seen: 0,
            nodes: vec![None; depth],
            noise,
            noise_log: None,
        }
    }

    /// Keeps a record of every node noise drawn, for auditing releases.
    pub fn with_noise_log(mut self) -> Self {
        self.noise_log = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &BtConfig {
        &self.config
    }

    pub fn observations_seen(&self) -> usize {
        self.seen
    }

    pub fn is_private(&self) -> bool {
        self.noise.is_private()
    }

    /// Number of partial-sum accumulators currently held.
    pub fn retained_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    pub fn noise_log(&self) -> Option<&[NodeNoise]> {
        self.noise_log.as_deref()
    }

    /// Adds the next observation. The caller truncates to the sensitivity bound first.
    pub fn ingest(&mut self, value: f64) -> Result<()> {
        if self.seen == self.config.segment_length {
            return Err(Error::SegmentFull(self.config.segment_length));
        }
        if !(value >= 0.0 && value <= self.config.sensitivity_bound) {
            return Err(Error::ValueOutOfRange {
                value,
                bound: self.config.sensitivity_bound,
            });
        }
        self.seen += 1;
        let mut carry = Node {
            start: self.seen,
            sum: ExactSum::from_value(value),
            noise: None,
        };
        for slot in self.nodes.iter_mut() {
            match slot.take() {
                Some(left) => {
                    let mut sum = left.sum;
                    sum.merge(&carry.sum);
                    carry = Node {
                        start: left.start,
                        sum,
                        noise: None,
                    };
                }
                None => {
                    *slot = Some(carry);
                    return Ok(());
                }
            }
        }
        unreachable!("capacity is a power of two no smaller than segment_length")
    }

    /// Adds `count` copies of `value`, leaving the same state as `count` calls
    /// to [`ingest`](Self::ingest) in `O(log count)` block insertions.
    pub fn ingest_run(&mut self, value: f64, count: usize) -> Result<()> {
        if count > self.config.segment_length - self.seen {
            return Err(Error::SegmentFull(self.config.segment_length));
        }
        if !(value >= 0.0 && value <= self.config.sensitivity_bound) {
            return Err(Error::ValueOutOfRange {
                value,
                bound: self.config.sensitivity_bound,
            });
        }
        let mut left = count;
        while left > 0 {
            // Largest aligned block that fits: levels below it are empty.
            let align = if self.seen == 0 {
                usize::BITS - 1
            } else {
                self.seen.trailing_zeros()
            };
            let level = align.min(usize::BITS - 1 - left.leading_zeros()) as usize;
            let width = 1usize << level;
            let mut carry = Node {
                start: self.seen + 1,
                sum: ExactSum::from_value(value * width as f64),
                noise: None,
            };
            self.seen += width;
            left -= width;
            for slot in self.nodes.iter_mut().skip(level) {
                match slot.take() {
                    Some(prev) => {
                        let mut sum = prev.sum;
                        sum.merge(&carry.sum);
                        carry = Node {
                            start: prev.start,
                            sum,
                            noise: None,
                        };
                    }
                    None => {
                        *slot = Some(carry);
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    /// Noisy prefix sum `[1, i]` as an unrounded double-double.
    ///
    /// Only the current prefix (`i == observations_seen`) is answerable; the
    /// state keeps `O(log n)` memory, so earlier releases are the caller's record.
    pub fn query_exact(&mut self, i: usize) -> Result<ExactSum> {
        if i == 0 || i > self.seen {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.seen,
            });
        }
        if i < self.seen {
            return Err(Error::NotRetained {
                index: i,
                current: self.seen,
            });
        }
        let scale = self.config.node_scale();
        let mut total = ExactSum::ZERO;
        for level in (0..self.nodes.len()).rev() {
            let Some(node) = self.nodes[level].as_mut() else {
                continue;
            };
            let noise = match node.noise {
                Some(noise) => noise,
                None => {
                    let noise = match &mut self.noise {
                        NoiseMode::Laplace(rng) => sample_laplace(rng, scale)?,
                        NoiseMode::Zero => 0.0,
                    };
                    node.noise = Some(noise);
                    if let Some(log) = self.noise_log.as_mut() {
                        log.push(NodeNoise {
                            interval: Interval {
                                start: node.start,
                                end: node.start + (1 << level) - 1,
                            },
                            noise,
                        });
                    }
                    noise
                }
            };
            total.merge(&node.sum);
            total.add(noise);
        }
        Ok(total)
    }

    /// Noisy prefix sum of the first `i` observations.
    pub fn query(&mut self, i: usize) -> Result<f64> {
        self.query_exact(i).map(|s| s.value())
    }
}
