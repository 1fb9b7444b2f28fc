//! `gqa`: stage-by-stage MHA → GQA conversion over checkpoint files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigArgs;

#[derive(Parser)]
#[command(name = "gqa", version, about = "Convert MHA checkpoints to GQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect per-head key/value caches on calibration tokens.
    Calibrate(ConfigArgs),
    /// Pairwise head similarity before and after alignment, as CSV.
    Analyze(ConfigArgs),
    /// Search a head grouping and write the plan.
    Group(ConfigArgs),
    /// Regroup heads, fuse alignments and check the model is unchanged.
    Transform(ConfigArgs),
    /// Mask-transfer training, then export the GQA checkpoint.
    Prune(ConfigArgs),
    /// Compare the logits of two checkpoints on random sequences.
    Verify(VerifyArgs),
    /// calibrate → analyze → group → transform → prune → verify.
    RunAll(ConfigArgs),
    /// Write a small MHA checkpoint and a matching token file.
    Toy(ToyArgs),
}

#[derive(clap::Args)]
struct VerifyArgs {
    reference: PathBuf,
    candidate: PathBuf,
    /// Largest allowed absolute logit difference.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 32)]
    sequences: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(clap::Args)]
struct ToyArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Token sequences to write.
    #[arg(long, default_value_t = 64)]
    sequences: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Train the model on the repeated-pattern task for this many steps.
    #[arg(long, default_value_t = 0)]
    train_steps: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Verification(String),
    Divergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Divergence(m) => f.write_str(m),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<gqa_core::Error> for CliError {
    fn from(e: gqa_core::Error) -> Self {
        use gqa_core::Error as E;
        match e {
            E::Divergence { .. } => CliError::Divergence(e.to_string()),
            E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Verify(a) => {
            set_threads(a.threads)?;
            commands::verify(&a.reference, &a.candidate, a.tol, a.sequences, a.seq_len, a.seed)
        }
        Command::Toy(a) => {
            set_threads(a.threads)?;
            commands::toy(&commands::ToyOptions {
                out_dir: a.out_dir,
                seed: a.seed,
                sequences: a.sequences,
                seq_len: a.seq_len,
                train_steps: a.train_steps,
                layers: a.layers,
            })
        }
        Command::Calibrate(ref a)
        | Command::Analyze(ref a)
        | Command::Group(ref a)
        | Command::Transform(ref a)
        | Command::Prune(ref a)
        | Command::RunAll(ref a) => {
            set_threads(a.threads)?;
            let cfg = a.resolve()?;
            std::fs::create_dir_all(&cfg.out_dir)
                .map_err(|e| CliError::Io(format!("{}: {e}", cfg.out_dir.display())))?;
            match cli.command {
                Command::Calibrate(_) => commands::calibrate(&cfg),
                Command::Analyze(_) => commands::analyze(&cfg),
                Command::Group(_) => commands::group(&cfg),
                Command::Transform(_) => commands::transform(&cfg),
                Command::Prune(_) => commands::prune(&cfg),
                _ => commands::run_all(&cfg),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
