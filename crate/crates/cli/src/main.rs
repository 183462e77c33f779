//! Batch front end: pretrain | train | probe | sweep | dump-frames |
//! gen-data. Every command writes a manifest next to its outputs; all
//! randomness flows from the config's master seed.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O failure.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "anonybench", version, about = "Penalty-driven anonymization benchmark")]
struct Cli {
    /// Output root (overrides the ANONYBENCH_OUT environment variable;
    /// default ./out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Config overrides applied after the file, e.g. --set b=0.5
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Identity-pretrain the anonymizer and write its checkpoint
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run two-step anonymization training from a pretrained checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
    },
    /// Train a fresh evaluation probe against a frozen anonymizer
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// action | privacy | privacy-raw-pretrained
        #[arg(long)]
        kind: String,
        /// Evaluate on a freshly generated dataset instead of the eval split
        #[arg(long)]
        novel_eval: bool,
    },
    /// Run the (B, lambda) grid and emit one CSV row per cell
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export raw and anonymized frames of selected clips as PPM files
    DumpFrames {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated clip indices into the action eval split
        #[arg(long, default_value = "0")]
        clips: String,
    },
    /// Generate the synthetic datasets and export them as PPM + JSON labels
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("ANONYBENCH_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn exit_code_for(err: &anonybench_core::Error) -> u8 {
    use anonybench_core::Error::*;
    match err {
        Config(_) | Checkpoint(_) | Json(_) => 2,
        Io(_) => 4,
        Numerical(_) => 3,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = out_root(cli.out.clone());
    let overrides = cli.set.clone();
    let result = match cli.cmd {
        Cmd::Pretrain { config } => commands::pretrain(&config, &overrides, &out),
        Cmd::Train { config, pretrained } => {
            commands::train(&config, &overrides, &pretrained, &out)
        }
        Cmd::Probe { config, checkpoint, kind, novel_eval } => {
            commands::probe(&config, &overrides, &checkpoint, &kind, novel_eval, &out)
        }
        Cmd::Sweep { config } => commands::sweep(&config, &overrides, &out),
        Cmd::DumpFrames { config, checkpoint, clips } => {
            commands::dump_frames(&config, &overrides, &checkpoint, &clips, &out)
        }
        Cmd::GenData { config } => commands::gen_data(&config, &overrides, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
