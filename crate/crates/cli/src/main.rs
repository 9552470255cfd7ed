use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use discogp::mask::MaskMode;
use discogp::AblationStrategy;
use discogp_cli::{
    cmd_analyze, cmd_compare, cmd_discover, cmd_export_dot, cmd_pretrain, Analysis, AnalyzeOptions, CliError,
    CliResult, Run, RunConfig,
};

#[derive(Parser)]
#[command(name = "discogp", version, about = "Circuit discovery by weight and edge pruning on toy transformers")]
struct Cli {
    /// Evaluation worker threads; evaluation runs sequentially, so values
    /// above 1 are accepted and capped.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    config: PathBuf,
    /// Overrides the seed in the config and the environment.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn run(&self) -> CliResult<Run> {
        RunConfig::load(&self.config)?.into_run(self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model for the configured task.
    Pretrain(ConfigArgs),
    /// Learn masks, prune, evaluate and write the circuit.
    Discover(ConfigArgs),
    /// Edge and weight overlap of two circuit files.
    Compare { a: PathBuf, b: PathBuf },
    /// heads | importance | edgesim | sweep
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        analysis: String,
        /// Ablation strategy for edgesim; all three when omitted.
        #[arg(long)]
        strategy: Option<String>,
        /// Comma-separated lambda_s values for sweep.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Mask mode for sweep.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Write the circuit as Graphviz DOT.
    ExportDot {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.workers {
        0 => return Err(CliError::Usage("--workers must be at least 1".into())),
        1 => {}
        n => log::info!("--workers {n}: evaluation runs sequentially"),
    }
    match cli.command {
        Command::Pretrain(args) => {
            let acc = cmd_pretrain(&args.run()?)?;
            println!("held-out accuracy {:.4}", acc);
        }
        Command::Discover(args) => {
            let out = cmd_discover(&args.run()?)?;
            print!("{}", out.report_text);
            println!("circuit written to {}", out.circuit.display());
        }
        Command::Compare { a, b } => print!("{}", cmd_compare(&a, &b)?.to_table()),
        Command::Analyze {
            config,
            analysis,
            strategy,
            grid,
            mode,
        } => {
            let options = AnalyzeOptions {
                strategy: strategy.map(|s| s.parse::<AblationStrategy>()).transpose().map_err(usage)?,
                grid,
                mode: mode.map(|s| s.parse::<MaskMode>()).transpose().map_err(usage)?,
            };
            let analysis: Analysis = analysis.parse()?;
            print!("{}", cmd_analyze(&config.run()?, analysis, &options)?);
        }
        Command::ExportDot { config, out } => {
            let path = cmd_export_dot(&config.run()?, out.as_deref())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_status() as u8)
        }
    }
}
