use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dpstream_core::datagen::{
    generate, light_tail_check, quantile_extrapolation_check, DistributionSpec, DEFAULT_TAIL_TOLERANCE,
};
use dpstream_core::experiment::{
    read_stream_file, run_experiment, write_stream_file, ExperimentConfig, NON_PRIVATE_WARNING,
};
use dpstream_core::threshold::DEFAULT_P_MAX;
use dpstream_core::tuning::{recommended_m, table_row, DataModel, OptimizationProblem, DEFAULT_TARGET_DIVISOR};
use dpstream_core::{Error, OutlierHorizon, Rng};

#[derive(Parser)]
#[command(
    name = "dpstream",
    version,
    about = "Private continual release of bounded-stream sums"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stream, one value per line.
    Gen(GenArgs),
    /// Run paired mechanism/baseline trials from a JSON config.
    Run(RunArgs),
    /// Optimize mechanism parameters for one or more time lags.
    Optimize(OptimizeArgs),
    /// Time-lag heuristics, printed as one JSON object.
    HeuristicM(HeuristicArgs),
    /// Check that a stream's tail is no heavier than exponential.
    TailCheck(TailArgs),
    /// Compare r * x_p against x_{p^r} on a stream.
    QuantileCheck(QuantileArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Distribution as inline JSON or a path to a JSON file.
    #[arg(long)]
    spec: String,
    #[arg(short, long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Directory for trials.jsonl, summary.json and histogram.csv.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Drop all noise (diagnostic; output is not private).
    #[arg(long)]
    zero_noise: bool,
    /// Run only the plain tree with noise scaled to the bound.
    #[arg(long)]
    baseline_only: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Exponential tail rate for the plug-in model.
    #[arg(long, conflicts_with = "sample")]
    gamma: Option<f64>,
    /// Sample file for the plug-in model (its first m values are used).
    #[arg(long)]
    sample: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(short, long)]
    n: u64,
    /// Time lag; repeat or comma-separate for several rows.
    #[arg(short, long, value_delimiter = ',', required = true)]
    m: Vec<u64>,
    #[arg(long)]
    bound: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 2f64.powi(-20))]
    delta: f64,
    #[arg(long, default_value_t = 0.02)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_P_MAX)]
    p_max: f64,
    /// Count only the observations after the time lag in the outlier term.
    #[arg(long)]
    after_lag: bool,
    /// Print JSON lines instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct HeuristicArgs {
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 2f64.powi(-20))]
    delta: f64,
    #[arg(long, default_value_t = 0.02)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_P_MAX)]
    p_max: f64,
    /// Divisor of the bound in the second criterion's sensitivity target.
    #[arg(long, default_value_t = DEFAULT_TARGET_DIVISOR)]
    divisor: f64,
}

#[derive(Args)]
struct TailArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    bound: f64,
    #[arg(short, long)]
    p: f64,
    #[arg(long, default_value_t = DEFAULT_TAIL_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct QuantileArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    bound: f64,
    #[arg(short, long)]
    p: f64,
    #[arg(short, long, value_delimiter = ',', default_values_t = [1.0, 1.25, 1.5, 1.75, 2.0])]
    r: Vec<f64>,
}

fn parse_spec(text: &str) -> Result<DistributionSpec> {
    let json = if text.trim_start().starts_with('{') {
        text.to_string()
    } else {
        std::fs::read_to_string(text).map_err(|e| Error::io(Path::new(text), e))?
    };
    serde_json::from_str(&json).map_err(|e| Error::Config(format!("distribution spec: {e}")).into())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let spec = parse_spec(&args.spec)?;
    let stream = generate(&spec, args.n, &mut Rng::new(args.seed))?;
    write_stream_file(&args.out, &stream)?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    config.zero_noise |= args.zero_noise;
    config.baseline_only |= args.baseline_only;
    config.validate()?;
    if config.zero_noise {
        eprintln!("warning: {NON_PRIVATE_WARNING}");
    }
    let output = run_experiment(&config, &args.out)?;
    let s = &output.summary;
    let show = |x: Option<f64>| x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    println!(
        "trials {}  fallback {}  mean IF {}  median IF {}  within alpha {:.4}",
        s.trials,
        s.fallback_trials,
        show(s.mean_improvement_factor),
        show(s.median_improvement_factor),
        s.within_alpha_fraction
    );
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn cmd_optimize(args: OptimizeArgs) -> Result<()> {
    let model = match (&args.model.gamma, &args.model.sample) {
        (Some(gamma), None) => DataModel::ExponentialTail {
            gamma: *gamma,
            bound: args.bound,
        },
        (None, Some(path)) => DataModel::EmpiricalSample {
            values: read_stream_file(path, args.bound)?.into_values(),
        },
        _ => bail!(Error::Config("give exactly one of --gamma or --sample".into())),
    };
    if !args.json {
        println!(
            "{:>8} {:>6} {:>6} {:>6} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "m", "IF", "r", "lambda", "p", "eps1/e", "b_qt", "b_lt", "b_lap", "b_out", "b_rt"
        );
    }
    for &m in &args.m {
        let problem = OptimizationProblem {
            n: args.n,
            m,
            epsilon: args.epsilon,
            delta: args.delta,
            beta_total: args.beta,
            bound: args.bound,
            p_max: args.p_max,
            data_model: model.clone(),
            horizon: if args.after_lag {
                OutlierHorizon::AfterLag
            } else {
                OutlierHorizon::Full
            },
            laplace_only: false,
        };
        let (row, _) = table_row(&problem)?;
        if args.json {
            println!("{}", serde_json::to_string(&row)?);
        } else {
            let f = row.beta_fractions;
            println!(
                "{:>8} {:>6.2} {:>6.2} {:>6.2} {:>7.4} {:>7.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2}{}",
                row.m,
                row.improvement_factor,
                row.r,
                row.lambda,
                row.p,
                row.epsilon1_fraction,
                f[0],
                f[1],
                f[2],
                f[3],
                f[4],
                if row.fallback { "  (fallback)" } else { "" }
            );
        }
    }
    Ok(())
}

fn cmd_heuristic(args: HeuristicArgs) -> Result<()> {
    let h = recommended_m(args.epsilon, args.delta, args.beta, args.p_max, args.divisor)?;
    println!("{}", serde_json::to_string(&h)?);
    Ok(())
}

fn cmd_tail(args: TailArgs) -> Result<()> {
    let stream = read_stream_file(&args.input, args.bound)?;
    let report = light_tail_check(&stream, args.p, args.tolerance)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_quantile(args: QuantileArgs) -> Result<()> {
    let stream = read_stream_file(&args.input, args.bound)?;
    for row in quantile_extrapolation_check(&stream, args.p, &args.r)? {
        println!("{}", serde_json::to_string(&row)?);
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Infeasible(_)) => 3,
        Some(Error::Io { .. }) | Some(Error::Parse { .. }) => 4,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 4,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::HeuristicM(a) => cmd_heuristic(a),
        Command::TailCheck(a) => cmd_tail(a),
        Command::QuantileCheck(a) => cmd_quantile(a),
    };
    match result.context("dpstream failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
