use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rsl_lab::runner::{self, ExperimentConfig, Pipeline, SweepParameter, SweepSpec, SweepValue};
use rsl_lab::selection::Gamma;
use rsl_lab::Error;

#[derive(Parser)]
#[command(name = "rsl-lab", version, about = "Small-loss sample selection experiments on synthetic noisy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the task and the train/val/test splits.
    Gen(Common),
    /// Warm-up training only, with the per-example loss ledger.
    Train(Common),
    /// Warm-up, class-wise selection and retraining on the selected set.
    Select(Common),
    /// Selection followed by weighted MixMatch refinement.
    RslWm(Common),
    /// Check the dominance lemmas and theorems on the configured noise matrix.
    VerifyTheory(Common),
    /// Rerun a pipeline for each value of one parameter.
    Sweep(SweepArgs),
    /// Loss-distribution diagnostics and the training-set-size sweep.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_noise: Option<u64>,
    #[arg(long)]
    seed_train: Option<u64>,
    #[arg(long)]
    seed_ssl: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    /// g0, mid, g1 or a number >= 1.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Write KDE curves and running-mean traces as CSV.
    #[arg(long)]
    emit_plot_data: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// beta, gamma, kappa, r or fraction; defaults to the config's sweep section.
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Pipeline run per value (warmup-only, rsl, rsl-wm).
    #[arg(long)]
    pipeline: Option<String>,
    /// Maximum concurrent runs.
    #[arg(long)]
    jobs: Option<NonZeroUsize>,
}

fn load(common: &Common, pipeline: Pipeline) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.pipeline = pipeline;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let seeds = &mut cfg.seeds;
    seeds.data = common.seed_data.unwrap_or(seeds.data);
    seeds.noise = common.seed_noise.unwrap_or(seeds.noise);
    seeds.train = common.seed_train.unwrap_or(seeds.train);
    seeds.ssl = common.seed_ssl.unwrap_or(seeds.ssl);
    if let Some(beta) = common.beta {
        cfg.selection.beta = beta;
    }
    if let Some(gamma) = &common.gamma {
        cfg.selection.gamma = gamma.parse::<Gamma>()?;
    }
    if let Some(kappa) = common.kappa {
        cfg.kappa = kappa;
    }
    cfg.emit_plot_data |= common.emit_plot_data;
    Ok(cfg)
}

fn parse_pipeline(name: &str) -> Result<Pipeline, Error> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| Error::Parameter(format!("unknown pipeline {name:?}")))
}

fn execute(command: Command) -> Result<(), Error> {
    let (cfg, metrics) = match command {
        Command::Gen(c) => {
            let cfg = load(&c, Pipeline::WarmupOnly)?;
            let m = runner::generate(&cfg)?;
            (cfg, m)
        }
        Command::Analyze(c) => {
            let cfg = load(&c, Pipeline::WarmupOnly)?;
            let m = runner::analyze(&cfg)?;
            (cfg, m)
        }
        Command::Train(c) => run(&c, Pipeline::WarmupOnly)?,
        Command::Select(c) => run(&c, Pipeline::Rsl)?,
        Command::RslWm(c) => run(&c, Pipeline::RslWm)?,
        Command::VerifyTheory(c) => {
            let (cfg, m) = run(&c, Pipeline::VerifyTheory)?;
            for (name, ok) in m["checks"].as_object().into_iter().flatten() {
                let status = if ok.as_bool() == Some(true) { "verified" } else { "FAILED" };
                println!("{name:<10} {status}");
            }
            (cfg, m)
        }
        Command::Sweep(args) => {
            let mut cfg = load(&args.common, Pipeline::Sweep)?;
            let mut spec = cfg.sweep.clone().unwrap_or(SweepSpec {
                parameter: SweepParameter::Beta,
                values: Vec::new(),
                pipeline: Pipeline::RslWm,
            });
            if let Some(p) = &args.param {
                spec.parameter = p.parse()?;
            }
            if !args.values.is_empty() {
                spec.values = args.values.iter().map(|v| v.parse()).collect::<Result<Vec<SweepValue>, _>>()?;
            }
            if let Some(p) = &args.pipeline {
                spec.pipeline = parse_pipeline(p)?;
            }
            if spec.values.is_empty() {
                return Err(Error::Parameter("sweep needs --values or a sweep section in the config".into()));
            }
            cfg.sweep = Some(spec.clone());
            cfg.validate()?;
            let m = runner::run_with_jobs(&cfg, args.jobs)?;
            for row in m["rows"].as_array().into_iter().flatten() {
                let value = row["value"].as_str().map_or_else(|| row["value"].to_string(), str::to_string);
                println!("{value:>8}  precision {}  best {}  last {}", row["precision"], row["best"], row["last"]);
            }
            (cfg, m)
        }
    };
    if let Some(acc) = metrics.get("accuracy").and_then(|a| a.as_object()) {
        for (stage, v) in acc {
            println!("{stage:<8} best {}  last {}", v["best"], v["last"]);
        }
    }
    if let Some(p) = metrics.pointer("/precision/rsl") {
        println!("selection precision {p}");
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn run(common: &Common, pipeline: Pipeline) -> Result<(ExperimentConfig, serde_json::Value), Error> {
    let cfg = load(common, pipeline)?;
    let metrics = runner::run(&cfg)?;
    Ok((cfg, metrics))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
