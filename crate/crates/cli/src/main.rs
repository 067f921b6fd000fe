use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use mma_cli::{resolve, run, Command};

/// Monotonic multihead attention for streaming transduction.
///
/// Any run-config field can be overridden with `--key value`, either as a
/// dotted path (`--model.d_lm 2`) or by a unique field name (`--steps 500`).
#[derive(Parser)]
#[command(name = "mma", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset into `paths.data`.
    GenData(Args),
    /// Train a model; writes a checkpoint and loss.csv.
    Train(Args),
    /// Beam-search decode a split into JSONL (`--mode head-sync|standard`).
    Decode(Args),
    /// Score a decode JSONL; writes summary and per-utterance CSVs.
    Eval(Args),
    /// Dump teacher-forced alignment heatmaps as CSV.
    Align(Args),
    /// Train and evaluate a grid of d_lm × HeadDrop × decode mode.
    Ablate(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON run config; unspecified fields take defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (cmd, args) = match cli.cmd {
        Cmd::GenData(a) => (Command::GenData, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Decode(a) => (Command::Decode, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Align(a) => (Command::Align, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
    };
    let result = resolve(args.config.as_deref(), &args.overrides).and_then(|cfg| run(cmd, &cfg));
    match result {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
