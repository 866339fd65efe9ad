mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icenet::Error;

use settings::Settings;

/// Channel-estimation experiments: data generation, training and the
/// evaluation reports.
#[derive(Debug, Parser)]
#[command(name = "icenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test sample files.
    GenData,
    /// Train an icenet or ecenet model.
    Train,
    /// NMSE against SNR for every method.
    EvalSweep,
    /// Tolerance sweep of one icenet checkpoint.
    Table1,
    /// Iteration histogram of one icenet checkpoint.
    IterHist,
    /// Parameter count and NMSE of icenet against ecenet depths.
    DepthCompare,
}

#[derive(Debug, Args)]
struct Flags {
    /// Plain-text key = value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    speed_kmh: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    snr_db: Option<f64>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<usize>,
    /// icenet or ecenet.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

fn settings(flags: &Flags) -> icenet::Result<Settings> {
    let mut s = Settings::default();
    if let Some(p) = &flags.config {
        s.apply_file(p)?;
    }
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| s.set(k, &v));
    set("seed", flags.seed.map(|v| v.to_string()))?;
    set("out_dir", flags.out_dir.as_ref().map(|p| p.display().to_string()))?;
    set("speed_kmh", flags.speed_kmh.map(|v| v.to_string()))?;
    set("snr_db", flags.snr_db.map(|v| v.to_string()))?;
    set("eps", flags.eps.map(|v| v.to_string()))?;
    set("tau", flags.tau.map(|v| v.to_string()))?;
    set("model", flags.model.clone())?;
    set("checkpoint", flags.checkpoint.as_ref().map(|p| p.display().to_string()))?;
    s.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    })?;
    Ok(s)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Divergence { .. } | Error::TrainingAborted(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = settings(&cli.flags).and_then(|s| match cli.command {
        Command::GenData => commands::gen_data(&s),
        Command::Train => commands::train_cmd(&s),
        Command::EvalSweep => commands::eval_sweep(&s),
        Command::Table1 => commands::table1(&s),
        Command::IterHist => commands::iter_hist(&s),
        Command::DepthCompare => commands::depth_compare(&s),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
