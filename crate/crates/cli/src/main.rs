use std::path::PathBuf;

use clap::{Parser, Subcommand};

use noskim_cli::commands;
use noskim_cli::config::{
    parse_black_box_mode, parse_budgets, parse_scenarios, process_env, ExperimentConfig,
};
use noskim_cli::error::{CliError, CliResult};

/// Efficiency-robustness evaluation for a skimming text classifier: generate
/// a corpus, train the model, search adversarial slowdown inputs under
/// white/gray/black-box access, and report the efficiency metrics.
#[derive(Parser)]
#[command(name = "noskim", version, about, max_term_width = 100)]
struct Cli {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic keyword-classification corpus and vocabulary.
    SynthData,
    /// Train the skim transformer and write the checkpoint.
    Train,
    /// Run the attack sweep over scenarios and budgets; writes attacks.jsonl.
    Attack {
        /// Comma-separated scenario filter
        /// (whitebox-token,whitebox-char,graybox-char,blackbox-char).
        #[arg(long)]
        scenarios: Option<String>,
        /// Comma-separated budget filter, e.g. 1,3,5.
        #[arg(long)]
        budgets: Option<String>,
        /// Black-box backend: counted (deterministic) or wall-clock.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Compute the metrics report from attack outputs.
    Evaluate {
        /// Accept artifacts whose config hash differs from the current one.
        #[arg(long)]
        force: bool,
    },
    /// Render report.csv and the SVG curves from report.json.
    Report,
}

fn run(cli: Cli) -> CliResult<()> {
    let env = process_env();
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &env)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    match cli.command {
        Command::SynthData => commands::cmd_synth_data(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Attack { scenarios, budgets, mode } => {
            if let Some(s) = scenarios {
                cfg.attack.scenarios = parse_scenarios(&s)?;
            }
            if let Some(b) = budgets {
                let mut budgets = parse_budgets(&b)?;
                budgets.sort_unstable();
                budgets.dedup();
                cfg.attack.budgets = budgets;
            }
            if let Some(m) = mode {
                cfg.attack.black_box_mode = parse_black_box_mode(&m)?;
            }
            commands::cmd_attack(&cfg)
        }
        Command::Evaluate { force } => commands::cmd_evaluate(&cfg, force),
        Command::Report => commands::cmd_report(&cfg),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code would be 2; usage problems exit 1 here.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e @ CliError::Usage(_)) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
