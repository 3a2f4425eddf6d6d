use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sidrec_cli::pipeline::Stage;
use sidrec_cli::{run, Command, GlobalArgs};

/// Semantic-ID recommendation with reasoning: data → quantizer → corpus →
/// alignment → activation → RL → evaluation.
#[derive(Parser)]
#[command(name = "sidrec", version)]
struct Cli {
    /// TOML run configuration (merged over defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides `run_dir` in the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override a config key, e.g. `--set rl.kl_coef=0.01` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or import) the catalog and interactions and split them.
    Synth,
    /// Train the residual quantizer and assign semantic IDs.
    Quantize,
    /// Build the alignment mixture and the cold-start reasoning set.
    BuildCorpus,
    /// Multi-task alignment fine-tuning.
    Align,
    /// One epoch of reason-then-recommend fine-tuning.
    Activate,
    /// Group-relative policy optimization.
    RlTrain {
        /// Continue from the latest periodic checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Rank the test split with every checkpoint and the popularity baseline.
    Evaluate,
    /// Best-of-N reasoning selection for the RL checkpoint.
    Bestofn,
    /// Assemble tables and CSVs from evaluation outputs.
    Report,
    /// Every stage in order.
    All,
}

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = GlobalArgs {
        config: cli.config,
        seed: cli.seed,
        run_dir: cli.run_dir,
        set: cli.set,
    };
    let command = match cli.command {
        Cmd::Synth => Command::Stage(Stage::Synth),
        Cmd::Quantize => Command::Stage(Stage::Quantize),
        Cmd::BuildCorpus => Command::Stage(Stage::BuildCorpus),
        Cmd::Align => Command::Stage(Stage::Align),
        Cmd::Activate => Command::Stage(Stage::Activate),
        Cmd::RlTrain { resume: false } => Command::Stage(Stage::RlTrain),
        Cmd::RlTrain { resume: true } => Command::ResumeRl,
        Cmd::Evaluate => Command::Stage(Stage::Evaluate),
        Cmd::Bestofn => Command::Stage(Stage::BestOfN),
        Cmd::Report => Command::Stage(Stage::Report),
        Cmd::All => Command::All,
    };
    if let Err(e) = run(&args, command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
