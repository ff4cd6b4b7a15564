//! `metasg`: runs configured experiments and exports plot data.
//!
//! Log verbosity follows `RUST_LOG` (default `info`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metasg_cli::{export_plot_data, run, ExperimentConfig, Grouping, Mode};

#[derive(Parser)]
#[command(
    name = "metasg",
    version,
    about = "Meta-Stackelberg federated-learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the mode named in the configuration.
    Run(RunArgs),
    /// Meta-RL pretraining of a defender policy.
    PretrainMetaRl(RunArgs),
    /// Meta-Stackelberg pretraining of a defender policy.
    PretrainMetaSg(RunArgs),
    /// Bayesian Stackelberg baseline training.
    PretrainBse(RunArgs),
    /// Online adaptation of a defender policy against the target attack.
    Adapt(RunArgs),
    /// One deployment episode per seed against the target attack.
    Evaluate(RunArgs),
    /// Aggregation rules against their reference implementations.
    AggBench(RunArgs),
    /// Parse and validate a configuration, then print it in normal form.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-group mean and std of the accuracy curves, one CSV per panel.
    Export {
        #[arg(long, value_enum, default_value = "run-id")]
        group_by: GroupBy,
        #[arg(long)]
        out: PathBuf,
        /// Metrics files to aggregate.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Output directory, replacing `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupBy {
    RunId,
    Defense,
    Attack,
    Mode,
}

fn run_command(args: RunArgs, mode: Option<Mode>) -> Result<ExitCode, metasg_cli::CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(s) = args.seed_override {
        cfg.seeds = vec![s];
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    let report = run(&cfg)?;
    print!("{}", report.summary);
    let failed = report.failed();
    if failed > 0 {
        eprintln!(
            "{failed} of {} seeds failed; see {}",
            report.seeds.len(),
            report.run_dir.display()
        );
        return Ok(ExitCode::FAILURE);
    }
    println!("wrote {}", report.run_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run_command(a, None),
        Command::PretrainMetaRl(a) => run_command(a, Some(Mode::PretrainMetaRl)),
        Command::PretrainMetaSg(a) => run_command(a, Some(Mode::PretrainMetaSg)),
        Command::PretrainBse(a) => run_command(a, Some(Mode::PretrainBse)),
        Command::Adapt(a) => run_command(a, Some(Mode::Adapt)),
        Command::Evaluate(a) => run_command(a, Some(Mode::Evaluate)),
        Command::AggBench(a) => run_command(a, Some(Mode::AggBench)),
        Command::Check { config } => ExperimentConfig::load(&config)
            .and_then(|c| c.to_toml())
            .map(|text| {
                print!("{text}");
                ExitCode::SUCCESS
            }),
        Command::Export {
            group_by,
            out,
            metrics,
        } => {
            let grouping = match group_by {
                GroupBy::RunId => Grouping::RunId,
                GroupBy::Defense => Grouping::Defense,
                GroupBy::Attack => Grouping::Attack,
                GroupBy::Mode => Grouping::Mode,
            };
            export_plot_data(&metrics, grouping, &out).map(|paths| {
                for p in paths {
                    println!("wrote {}", p.display());
                }
                ExitCode::SUCCESS
            })
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
