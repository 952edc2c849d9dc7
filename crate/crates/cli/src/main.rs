use std::path::PathBuf;
use std::process::ExitCode;

use cgpo_cli::commands::{self, BaselineOptions, EvalOptions};
use cgpo_cli::CliError;
use cgpo_core::baselines::BaselineKind;
use cgpo_core::SplitLabel;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cgpo", version, about = "Train and evaluate calibration guidance prompt policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_split(s: &str) -> Result<SplitLabel, String> {
    commands::split_label(s).map_err(|e| e.to_string())
}

fn parse_kind(s: &str) -> Result<BaselineKind, String> {
    s.parse::<BaselineKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a softmax CGP policy with GRPO.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite results already in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained checkpoint (or the configured remote generator).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: SplitLabel,
        /// Sample CGPs instead of taking the most likely template.
        #[arg(long)]
        sample: bool,
        /// Samples dropped upstream, counted as incorrect in accuracy.
        #[arg(long)]
        extra_incorrect: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run a comparison method: verbalized, verbalized_fixed_pa, consistency, avg_conf.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: BaselineKind,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: SplitLabel,
        #[arg(long)]
        extra_incorrect: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Merge report.json files into comparison tables and reliability curves.
    Report {
        /// Evaluation directories or report.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also draw reliability.svg.
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        force: bool,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print (or write) a commented default configuration.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, force } => {
            let dir = commands::cmd_train(&config, force)?;
            println!("{}", dir.display());
        }
        Command::Eval { config, checkpoint, split, sample, extra_incorrect, out, force } => {
            let opts = EvalOptions { checkpoint, split, sample, extra_incorrect, out, force };
            let dir = commands::cmd_eval(&config, &opts)?;
            println!("{}", dir.display());
        }
        Command::Baseline { config, kind, split, extra_incorrect, out, force } => {
            let opts = BaselineOptions { kind, split, extra_incorrect, out, force };
            let dir = commands::cmd_baseline(&config, &opts)?;
            println!("{}", dir.display());
        }
        Command::Report { inputs, out, svg, force } => {
            for f in commands::cmd_report(&inputs, &out, svg, force)? {
                println!("{}", f.display());
            }
        }
        Command::Config { action: ConfigAction::Init { out, force } } => {
            if let Some(text) = commands::cmd_config_init(out.as_deref(), force)? {
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
