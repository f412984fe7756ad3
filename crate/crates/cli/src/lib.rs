//! `dreamcatcher` command-line front end. Each subcommand reads inputs named
//! in the config file and writes fixed file names under `paths.output_dir`.

mod commands;

use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

pub use commands::CliError;

/// Exit code for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit code when inputs fail validation or a stage rejects the data.
pub const EXIT_INVALID: i32 = 1;
/// Exit code for I/O, usage and config errors.
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dreamcatcher", version, about = "Factuality labeling, knowledge probes and toy RLKF")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-check the corpus files and write validation.json.
    Validate(ConfigArg),
    /// Embed every question, answer and generation into the cache.
    Embed(ConfigArg),
    /// Pre-label generations, evaluate the (site, layer) probe grid and save the best probe.
    ProbeTrain(ConfigArg),
    /// Evaluate the saved probe and write per-question probe scores.
    ProbeEval(ConfigArg),
    /// Compute normalized factuality scores for every Normal generation.
    Score(ConfigArg),
    /// Median-split labels, knowledge categories and preference pairs.
    Label(ConfigArg),
    /// Train the reward model on the labeled preference pairs.
    RmTrain(ConfigArg),
    /// Evaluate the reward model on the held-out pairs by category.
    RmEval(ConfigArg),
    /// Run PPO with guidance on the toy environment.
    Ppo(ConfigArg),
    /// Write a deterministic synthetic fixture corpus.
    Synth {
        /// Output directory.
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long)]
        questions: Option<usize>,
    },
    /// Aggregate the stage outputs into summary.json and summary.md.
    Report(ConfigArg),
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_IO } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be positive");
            return EXIT_IO;
        }
        // Fails only if a pool already exists, e.g. when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match commands::dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
