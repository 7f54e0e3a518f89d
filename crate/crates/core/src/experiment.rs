//! Monte Carlo harness: paired mechanism and baseline runs over many seeded
//! trials, with JSON Lines, JSON and CSV reports.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::{ErrorBudget, PrivacyBudget};
use crate::datagen::{generate, DistributionSpec};
use crate::errmodel::{
    bt_error_term, outlier_bound_light_tailed, total_alpha, OutlierHorizon, TailModel, UtilityParams,
};
use crate::error::{Error, Result};
use crate::noise::{NoiseKind, Rng};
use crate::pipeline::{MechanismConfig, MechanismState, PipelineNoise};
use crate::stream::{ExactSum, Stream};
use crate::threshold::{ThresholdParams, DEFAULT_P_MAX};
use crate::tuning::{table_row, DataModel, OptimizationProblem, TableRow};

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";

pub const NON_PRIVATE_WARNING: &str =
    "zero-noise diagnostic mode: released values carry no noise and are NOT differentially private";

const DATA_STREAM: u64 = 0;
const MECHANISM_STREAM: u64 = 1;
const BASELINE_STREAM: u64 = 2;
const ERROR_QUANTILES: [f64; 6] = [0.5, 0.9, 0.95, 0.98, 0.99, 1.0];

fn default_epsilon() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    2f64.powi(-20)
}
fn default_beta() -> f64 {
    0.02
}
fn default_epsilon1_fraction() -> f64 {
    0.9
}
fn default_beta_fractions() -> [f64; 5] {
    [0.2; 5]
}
fn default_p_max() -> f64 {
    DEFAULT_P_MAX
}
fn default_trials() -> usize {
    1
}
fn default_bins() -> usize {
    40
}

/// `"auto"` or explicit `(p, lambda, r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSpec {
    Keyword(String),
    Manual { p: f64, lambda: f64, r: f64 },
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec::Keyword("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Text file, one value per line; the same stream is used by every trial.
    File(PathBuf),
    /// A fresh stream per trial.
    Synthetic(DistributionSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub m: usize,
    pub bound: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon1_fraction")]
    pub epsilon1_fraction: f64,
    /// `beta_qt, beta_lt, beta_lap, beta_out, beta_rt` as fractions of `beta`.
    #[serde(default = "default_beta_fractions")]
    pub beta_fractions: [f64; 5],
    #[serde(default = "default_p_max")]
    pub p_max: f64,
    #[serde(default)]
    pub threshold: ThresholdSpec,
    #[serde(default)]
    pub data_model: Option<DataModel>,
    pub source: DataSource,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub zero_noise: bool,
    #[serde(default)]
    pub baseline_only: bool,
    #[serde(default)]
    pub horizon: OutlierHorizon,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.m >= self.n {
            return bad(format!("need 0 < m < n, got m = {} and n = {}", self.m, self.n));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return bad(format!("bound must be positive, got {}", self.bound));
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive".into());
        }
        if let ThresholdSpec::Keyword(word) = &self.threshold {
            if word != "auto" {
                return bad(format!(
                    "threshold must be \"auto\" or an object with p, lambda, r; got {word:?}"
                ));
            }
            if self.data_model.is_none() && !self.baseline_only {
                return bad("threshold \"auto\" requires a data_model".into());
            }
        }
        if let DataSource::Synthetic(spec) = &self.source {
            spec.validate().map_err(|e| Error::Config(format!("source: {e}")))?;
            if spec.bound() > self.bound {
                return bad(format!(
                    "source bound {} exceeds the stream bound {}",
                    spec.bound(),
                    self.bound
                ));
            }
        }
        self.privacy().map_err(|e| Error::Config(e.to_string()))?;
        self.error_budget().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn privacy(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::from_fraction(self.epsilon, self.epsilon1_fraction, self.delta)
    }

    pub fn error_budget(&self) -> Result<ErrorBudget> {
        ErrorBudget::from_fractions(self.beta, self.beta_fractions)
    }
}

/// Parameters after `"auto"` has been resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    /// `None` when the run is plain BT.
    pub mechanism: Option<MechanismConfig>,
    pub error_budget: ErrorBudget,
    pub optimized_row: Option<TableRow>,
}

pub fn resolve(config: &ExperimentConfig) -> Result<ResolvedParams> {
    config.validate()?;
    if config.baseline_only {
        return Ok(ResolvedParams {
            mechanism: None,
            error_budget: config.error_budget()?,
            optimized_row: None,
        });
    }
    match &config.threshold {
        ThresholdSpec::Manual { p, lambda, r } => {
            let privacy = config.privacy()?;
            let errors = config.error_budget()?;
            let threshold = ThresholdParams::calibrated(
                *p,
                *lambda,
                *r,
                errors.beta_lt,
                errors.beta_rt,
                NoiseKind::Laplace,
                &privacy,
            )
            .with_p_max(config.p_max);
            Ok(ResolvedParams {
                mechanism: Some(MechanismConfig {
                    n: config.n,
                    m: config.m,
                    bound: config.bound,
                    privacy,
                    threshold,
                }),
                error_budget: errors,
                optimized_row: None,
            })
        }
        ThresholdSpec::Keyword(_) => {
            let model = config.data_model.clone().expect("validated");
            let problem = OptimizationProblem {
                n: config.n as u64,
                m: config.m as u64,
                epsilon: config.epsilon,
                delta: config.delta,
                beta_total: config.beta,
                bound: config.bound,
                p_max: config.p_max,
                data_model: model,
                horizon: config.horizon,
                laplace_only: false,
            };
            let (row, optimized) = table_row(&problem)?;
            Ok(match optimized {
                Some(opt) => ResolvedParams {
                    mechanism: Some(MechanismConfig {
                        n: config.n,
                        m: config.m,
                        bound: config.bound,
                        privacy: opt.privacy,
                        threshold: opt.threshold,
                    }),
                    error_budget: opt.utility.error_budget,
                    optimized_row: Some(row),
                },
                None => ResolvedParams {
                    mechanism: None,
                    error_budget: config.error_budget()?,
                    optimized_row: Some(row),
                },
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub tau: Option<f64>,
    pub tau_final: Option<f64>,
    pub x_hat: Option<f64>,
    /// Last released sum minus the true final sum.
    pub final_error: f64,
    pub baseline_error: f64,
    pub final_abs_error: f64,
    pub baseline_abs_error: f64,
    /// Mean absolute error over the releases at steps `m..=n`.
    pub mean_abs_error: f64,
    pub baseline_mean_abs_error: f64,
    /// Truncation loss `sum_i (x_i - min(x_i, tau_final))`.
    pub outlier_error: f64,
    /// Final error with the truncation loss removed: the noise alone.
    pub laplace_error: f64,
    pub estimated_outlier_bound: Option<f64>,
    pub outlier_ratio: Option<f64>,
    pub alpha_bound: f64,
    pub within_alpha: bool,
    /// Baseline over mechanism mean absolute error; `null` when undefined.
    pub improvement_factor: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorQuantile {
    pub q: f64,
    pub mechanism: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub seed: u64,
    pub non_private: bool,
    pub params: ResolvedParams,
    pub fallback_trials: usize,
    /// Mean of the per-trial improvement factors that are defined.
    pub mean_improvement_factor: Option<f64>,
    pub median_improvement_factor: Option<f64>,
    /// Mean baseline final error over mean mechanism final error.
    pub final_error_ratio: Option<f64>,
    pub mean_final_abs_error: f64,
    pub mean_baseline_final_abs_error: f64,
    pub within_alpha_fraction: f64,
    pub outlier_ratio_at_most_one_fraction: Option<f64>,
    pub error_quantiles: Vec<ErrorQuantile>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub mechanism_density: f64,
    pub baseline_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub trials: Vec<TrialReport>,
    pub summary: Summary,
    pub histogram: Vec<HistogramBin>,
    /// Signed final errors divided by the bound, for plotting.
    pub mechanism_errors: Vec<f64>,
    pub baseline_errors: Vec<f64>,
}

struct RunErrors {
    final_signed: f64,
    mean_abs: f64,
}

/// Feeds `values` and records errors against the exact running sum.
fn drive(state: &mut MechanismState, values: &[f64], eval_from: usize) -> Result<RunErrors> {
    let mut truth = ExactSum::ZERO;
    let mut abs_total = ExactSum::ZERO;
    let mut count = 0usize;
    let mut last = 0.0;
    for (idx, &v) in values.iter().enumerate() {
        truth.add(v);
        if let Some(out) = state.ingest(v)? {
            let err = out - truth.value();
            last = err;
            if idx + 1 >= eval_from {
                abs_total.add(err.abs());
                count += 1;
            }
        }
    }
    Ok(RunErrors {
        final_signed: last,
        mean_abs: abs_total.value() / count.max(1) as f64,
    })
}

fn noise_for(rng: Rng, zero_noise: bool) -> PipelineNoise {
    if zero_noise {
        PipelineNoise::Zero
    } else {
        PipelineNoise::Private(rng)
    }
}

/// Runs trial `trial` of `config` on `values` (already drawn for this trial).
pub fn run_trial(
    config: &ExperimentConfig,
    params: &ResolvedParams,
    trial: usize,
    trial_rng: &Rng,
    values: &[f64],
) -> Result<TrialReport> {
    let n = config.n;
    let errors = params.error_budget;
    let baseline_noise = noise_for(trial_rng.substream(BASELINE_STREAM), config.zero_noise);
    let mut baseline = MechanismState::baseline(n, config.bound, config.epsilon, baseline_noise)?;
    let base = drive(&mut baseline, values, config.m)?;

    let mechanism = match &params.mechanism {
        Some(mc) => {
            let noise = noise_for(trial_rng.substream(MECHANISM_STREAM), config.zero_noise);
            let mut state = MechanismState::new(*mc, noise)?;
            let run = drive(&mut state, values, config.m)?;
            Some((state, run, mc))
        }
        None => None,
    };

    let baseline_alpha = bt_error_term(n as u64, config.bound, config.epsilon, config.beta)?;
    let report = match mechanism {
        Some((state, run, mc)) if !state.is_baseline() => {
            let est = *state.threshold().expect("streaming run released a threshold");
            let t = &mc.threshold;
            let outlier_n = match config.horizon {
                OutlierHorizon::Full => n,
                OutlierHorizon::AfterLag => n - config.m,
            } as u64;
            let x_hat = est.x_hat;
            let estimated = if x_hat > 0.0 {
                Some(outlier_bound_light_tailed(outlier_n, t.p, t.r, x_hat, errors.beta_out)?)
            } else {
                None
            };
            let alpha = if est.tau > 0.0 && x_hat > 0.0 {
                let up = UtilityParams {
                    n: n as u64,
                    m: config.m as u64,
                    epsilon: config.epsilon,
                    tau: est.tau,
                    r: t.r,
                    p: t.p,
                    x_hat_lambda_p: x_hat,
                    bound: config.bound,
                    error_budget: errors,
                };
                total_alpha(&up, TailModel::LightTailed, config.horizon)?
            } else {
                baseline_alpha
            };
            let outlier = state.truncation_loss();
            let final_abs = run.final_signed.abs();
            TrialReport {
                trial,
                seed: trial_rng.seed(),
                tau: Some(est.tau),
                tau_final: Some(est.tau_final),
                x_hat: Some(x_hat),
                final_error: run.final_signed,
                baseline_error: base.final_signed,
                final_abs_error: final_abs,
                baseline_abs_error: base.final_signed.abs(),
                mean_abs_error: run.mean_abs,
                baseline_mean_abs_error: base.mean_abs,
                outlier_error: outlier,
                laplace_error: (run.final_signed + outlier).abs(),
                estimated_outlier_bound: estimated,
                outlier_ratio: estimated.map(|e| outlier / e),
                alpha_bound: alpha,
                within_alpha: final_abs <= alpha,
                improvement_factor: ratio(base.mean_abs, run.mean_abs),
                fallback: false,
            }
        }
        Some((state, run, _)) => {
            let est = state.threshold().copied();
            let final_abs = run.final_signed.abs();
            TrialReport {
                trial,
                seed: trial_rng.seed(),
                tau: est.map(|e| e.tau),
                tau_final: est.map(|e| e.tau_final),
                x_hat: est.map(|e| e.x_hat),
                final_error: run.final_signed,
                baseline_error: base.final_signed,
                final_abs_error: final_abs,
                baseline_abs_error: base.final_signed.abs(),
                mean_abs_error: run.mean_abs,
                baseline_mean_abs_error: base.mean_abs,
                outlier_error: 0.0,
                laplace_error: final_abs,
                estimated_outlier_bound: None,
                outlier_ratio: None,
                alpha_bound: baseline_alpha,
                within_alpha: final_abs <= baseline_alpha,
                improvement_factor: Some(1.0),
                fallback: true,
            }
        }
        None => {
            let final_abs = base.final_signed.abs();
            TrialReport {
                trial,
                seed: trial_rng.seed(),
                tau: None,
                tau_final: None,
                x_hat: None,
                final_error: base.final_signed,
                baseline_error: base.final_signed,
                final_abs_error: final_abs,
                baseline_abs_error: final_abs,
                mean_abs_error: base.mean_abs,
                baseline_mean_abs_error: base.mean_abs,
                outlier_error: 0.0,
                laplace_error: final_abs,
                estimated_outlier_bound: None,
                outlier_ratio: None,
                alpha_bound: baseline_alpha,
                within_alpha: final_abs <= baseline_alpha,
                improvement_factor: Some(1.0),
                fallback: true,
            }
        }
    };
    Ok(report)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0 && num.is_finite()).then(|| num / den)
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[idx - 1]
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn histogram(mech: &[f64], base: &[f64], bins: usize) -> Vec<HistogramBin> {
    let reach = mech
        .iter()
        .chain(base)
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(1e-12);
    let width = 2.0 * reach / bins as f64;
    let count = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        for &x in xs {
            let b = (((x + reach) / width) as usize).min(bins - 1);
            c[b] += 1;
        }
        c
    };
    let (cm, cb) = (count(mech), count(base));
    (0..bins)
        .map(|b| HistogramBin {
            lo: -reach + b as f64 * width,
            hi: -reach + (b + 1) as f64 * width,
            mechanism_density: cm[b] as f64 / (mech.len().max(1) as f64 * width),
            baseline_density: cb[b] as f64 / (base.len().max(1) as f64 * width),
        })
        .collect()
}

/// Runs every trial in order and assembles the reports.
pub fn run_trials(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let params = resolve(config)?;
    let master = Rng::new(config.seed);
    let file_values = match &config.source {
        DataSource::File(path) => {
            let stream = read_stream_file(path, config.bound)?;
            if stream.len() < config.n {
                return Err(Error::InsufficientData(format!(
                    "{} holds {} values, n = {}",
                    path.display(),
                    stream.len(),
                    config.n
                )));
            }
            Some(stream.into_values())
        }
        DataSource::Synthetic(_) => None,
    };
    let mut reports = Vec::with_capacity(config.trials);
    let mut mech_signed = Vec::with_capacity(config.trials);
    let mut base_signed = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let trial_rng = master.substream(trial as u64);
        let drawn;
        let values: &[f64] = match (&config.source, &file_values) {
            (_, Some(values)) => &values[..config.n],
            (DataSource::Synthetic(spec), None) => {
                let mut data_rng = trial_rng.substream(DATA_STREAM);
                drawn = generate(spec, config.n, &mut data_rng)?.into_values();
                &drawn
            }
            (DataSource::File(_), None) => unreachable!("file source was loaded"),
        };
        let report = run_trial(config, &params, trial, &trial_rng, values)?;
        mech_signed.push(report.final_error / config.bound);
        base_signed.push(report.baseline_error / config.bound);
        reports.push(report);
    }
    let summary = summarize(config, params, &reports);
    let histogram = histogram(&mech_signed, &base_signed, config.histogram_bins);
    Ok(ExperimentOutput {
        trials: reports,
        summary,
        histogram,
        mechanism_errors: mech_signed,
        baseline_errors: base_signed,
    })
}

fn summarize(config: &ExperimentConfig, params: ResolvedParams, reports: &[TrialReport]) -> Summary {
    let ifs: Vec<f64> = reports.iter().filter_map(|r| r.improvement_factor).collect();
    let median_if = if ifs.is_empty() {
        None
    } else {
        let mut sorted = ifs.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        Some(nearest_rank(&sorted, 0.5))
    };
    let mean_final = mean(reports.iter().map(|r| r.final_abs_error)).unwrap_or(0.0);
    let mean_base = mean(reports.iter().map(|r| r.baseline_abs_error)).unwrap_or(0.0);
    let mut mech_sorted: Vec<f64> = reports.iter().map(|r| r.final_abs_error).collect();
    let mut base_sorted: Vec<f64> = reports.iter().map(|r| r.baseline_abs_error).collect();
    mech_sorted.sort_unstable_by(f64::total_cmp);
    base_sorted.sort_unstable_by(f64::total_cmp);
    let ratios: Vec<f64> = reports.iter().filter_map(|r| r.outlier_ratio).collect();
    let mut warnings = Vec::new();
    if config.zero_noise {
        warnings.push(NON_PRIVATE_WARNING.to_string());
    }
    Summary {
        trials: reports.len(),
        seed: config.seed,
        non_private: config.zero_noise,
        params,
        fallback_trials: reports.iter().filter(|r| r.fallback).count(),
        mean_improvement_factor: mean(ifs.iter().copied()),
        median_improvement_factor: median_if,
        final_error_ratio: ratio(mean_base, mean_final),
        mean_final_abs_error: mean_final,
        mean_baseline_final_abs_error: mean_base,
        within_alpha_fraction: reports.iter().filter(|r| r.within_alpha).count() as f64 / reports.len().max(1) as f64,
        outlier_ratio_at_most_one_fraction: (!ratios.is_empty())
            .then(|| ratios.iter().filter(|&&r| r <= 1.0).count() as f64 / ratios.len() as f64),
        error_quantiles: ERROR_QUANTILES
            .iter()
            .map(|&q| ErrorQuantile {
                q,
                mechanism: nearest_rank(&mech_sorted, q),
                baseline: nearest_rank(&base_sorted, q),
            })
            .collect(),
        warnings,
    }
}

/// Runs the experiment and writes the three report files into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let output = run_trials(config)?;
    write_reports(&output, out_dir)?;
    Ok(output)
}

pub fn write_reports(output: &ExperimentOutput, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let to_config = |e: serde_json::Error| Error::Config(e.to_string());

    let path = out_dir.join(TRIALS_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for report in &output.trials {
        let line = serde_json::to_string(report).map_err(to_config)?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&output.summary).map_err(to_config)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join(HISTOGRAM_FILE);
    let mut csv = String::from("bin_lo,bin_hi,mechanism_density,baseline_density\n");
    for bin in &output.histogram {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            bin.lo, bin.hi, bin.mechanism_density, bin.baseline_density
        ));
    }
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Reads one decimal value per line; blank lines and `#` comments are skipped.
pub fn read_stream_file(path: &Path, bound: f64) -> Result<Stream> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let value: f64 = text.parse().map_err(|_| parse_err(format!("not a number: {text:?}")))?;
        if !(value >= 0.0 && value <= bound) {
            return Err(parse_err(format!("value {value} outside [0, {bound}]")));
        }
        values.push(value);
    }
    if values.is_empty() {
        return Err(Error::InsufficientData(format!("{} holds no values", path.display())));
    }
    Stream::new(values, bound)
}

pub fn write_stream_file(path: &Path, stream: &Stream) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in stream.values() {
        writeln!(w, "{v}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "n": 60000, "m": 50000, "bound": 100.0,
                "threshold": {"p": 0.005, "lambda": 0.85, "r": 1.5},
                "source": {"synthetic": {"kind": "truncated_exponential", "gamma": 0.2, "bound": 100.0}},
                "trials": 3, "seed": 17
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_follow_the_standard_settings() {
        let c = small_config();
        assert_eq!((c.epsilon, c.delta, c.beta), (1.0, 2f64.powi(-20), 0.02));
        assert_eq!(c.beta_fractions, [0.2; 5]);
    }

    #[test]
    fn config_validation() {
        let bad = [
            r#"{"n": 10, "m": 10, "bound": 1.0, "source": {"file": "x"}}"#,
            r#"{"n": 10, "m": 5, "bound": 1.0, "source": {"file": "x"}}"#,
            r#"{"n": 10, "m": 5, "bound": 1.0, "threshold": "manual", "source": {"file": "x"}}"#,
            r#"{"n": 10, "m": 5, "bound": 1.0, "threshold": {"p": 0.1, "lambda": 1, "r": 1}, "source": {"file": "x"}, "bogus": 1}"#,
            r#"{"n": 10, "m": 5, "bound": 1.0, "threshold": {"p": 0.1, "lambda": 1, "r": 1}, "source": {"file": "x"}, "trials": 0}"#,
        ];
        for text in bad {
            assert!(
                matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn trials_are_reproducible_and_ordered() {
        let c = small_config();
        let a = run_trials(&c).unwrap();
        let b = run_trials(&c).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.trials.iter().map(|t| t.trial).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(a.trials.iter().all(|t| !t.fallback));
    }

    #[test]
    fn zero_noise_without_truncation_has_no_error() {
        let mut c = small_config();
        c.zero_noise = true;
        c.trials = 1;
        c.source = DataSource::Synthetic(DistributionSpec::PointMass {
            value: 3.0,
            bound: 100.0,
        });
        let out = run_trials(&c).unwrap();
        let t = &out.trials[0];
        assert_eq!(t.final_abs_error, 0.0);
        assert_eq!(t.improvement_factor, None);
        assert!(out.summary.non_private && !out.summary.warnings.is_empty());
    }

    #[test]
    fn stream_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        let stream = Stream::new(vec![0.1, 2.5, 1.0 / 3.0, 7.0], 10.0).unwrap();
        write_stream_file(&path, &stream).unwrap();
        assert_eq!(read_stream_file(&path, 10.0).unwrap(), stream);

        fs::write(&path, "# header\n1.5\n\n2\n").unwrap();
        assert_eq!(read_stream_file(&path, 10.0).unwrap().values(), &[1.5, 2.0]);
        fs::write(&path, "1\n11\n").unwrap();
        assert!(matches!(
            read_stream_file(&path, 10.0),
            Err(Error::Parse { line: 2, .. })
        ));
        fs::write(&path, "1\nabc\n").unwrap();
        assert!(matches!(
            read_stream_file(&path, 10.0),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_stream_file(&dir.path().join("missing"), 10.0),
            Err(Error::Io { .. })
        ));
    }
}
