//! `dfmim`: simulation studies and the chunk-level speech pipeline.
//!
//! Exit codes: 0 on success, 1 when the work itself fails, 2 on bad
//! invocations (clap reports its own parse failures with 2 as well).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfmim_cli::commands::{self, CliError, Globals};

#[derive(Parser)]
#[command(
    name = "dfmim",
    version,
    about = "Deep functional multiple-index models: simulated benchmarks and speech emotion recognition"
)]
struct Cli {
    /// TOML configuration file; omitted keys fall back to defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Suppress console output (artifacts are still written).
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated functional regression dataset (--out is the file).
    Simulate {
        /// Scenario name: S1, S2 or S3.
        #[arg(long)]
        scenario: String,
        /// Number of samples.
        #[arg(long)]
        n: usize,
    },
    /// Train on simulated data and report test RMSE (--out is a directory).
    TrainSim {
        #[arg(long)]
        scenario: String,
    },
    /// Evaluate a regression checkpoint on a dataset file.
    EvalSim {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Extract chunked MFCC features for every manifest row (--out is a directory).
    Extract {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },
    /// Speaker-wise cross-validation over extracted features (--out is a directory).
    TrainSer {
        /// Directory produced by `extract`.
        #[arg(long, value_name = "DIR")]
        features: PathBuf,
        /// Run only the first N folds (0 = all).
        #[arg(long, default_value_t = 0)]
        max_folds: usize,
        /// Also write one checkpoint per fold.
        #[arg(long)]
        save_models: bool,
    },
    /// Evaluate a classifier checkpoint on extracted features.
    EvalSer {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        features: PathBuf,
        /// Restrict to one speaker.
        #[arg(long)]
        speaker: Option<String>,
    },
    /// Finite-difference checks of every layer's gradients.
    Gradcheck,
    /// Fast internal consistency checks.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };
    let result = match &cli.command {
        Command::Simulate { scenario, n } => commands::simulate(&globals, scenario, *n),
        Command::TrainSim { scenario } => commands::train_sim(&globals, scenario),
        Command::EvalSim { checkpoint, data } => commands::eval_sim(&globals, checkpoint, data),
        Command::Extract { manifest } => commands::extract(&globals, manifest),
        Command::TrainSer {
            features,
            max_folds,
            save_models,
        } => commands::train_ser(&globals, features, *max_folds, *save_models),
        Command::EvalSer {
            checkpoint,
            features,
            speaker,
        } => commands::eval_ser(&globals, checkpoint, features, speaker.as_deref()),
        Command::Gradcheck => commands::gradcheck(&globals),
        Command::Selftest => commands::selftest(&globals),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
