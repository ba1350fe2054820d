// SPDX-License-Identifier: Apache-2.0

use std::num::NonZeroU64;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use pim_aging::harness::{self, commands, ExperimentConfig};
use pim_aging::pim_sim::SimMode;
use pim_aging::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "pim-aging", version, about = "Aged SRAM PIM simulator and DOFT trainer")]
struct Cli {
    /// TOML experiment configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Restrict evaluation to one simulator mode.
    #[arg(long, global = true)]
    mode: Option<SimMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantization-aware baseline training; writes pretrained.ckpt.
    Pretrain,
    /// Generate the aging mask; writes aging.mask.
    AgeGen,
    /// Differential orientation fine-tuning; writes doft.ckpt and history.csv.
    Doft {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Authorized and unauthorized test accuracy; writes eval.csv.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Grid sweep; writes sweep.csv and sweep_summary.csv.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Exhaustive-search cost exponent for a mask.
    Security {
        #[arg(long)]
        cells: NonZeroU64,
        #[arg(long, default_value = "1")]
        levels: NonZeroU64,
    },
    /// Print the default configuration.
    EmitConfig,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => harness::load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let modes: Vec<SimMode> = cli.mode.map_or_else(|| SimMode::ALL.to_vec(), |m| vec![m]);
    let out = cli.out.as_path();

    match cli.command {
        Command::Pretrain => {
            let r = commands::cmd_pretrain(&cfg, out)?;
            println!("checkpoint\t{}", r.checkpoint.display());
            println!("test_accuracy\t{:.4}", r.test_accuracy);
        }
        Command::AgeGen => {
            let p = commands::cmd_agegen(&cfg, out)?;
            println!("mask\t{}", p.display());
        }
        Command::Doft { checkpoint, mask } => {
            cfg.paths.checkpoint = checkpoint.or(cfg.paths.checkpoint);
            cfg.paths.mask = mask.or(cfg.paths.mask);
            let r = commands::cmd_doft(&cfg, out)?;
            if let Some(last) = r.history.epochs.last() {
                info!("last epoch val auth {:.4} unauth {:.4}", last.val_auth_acc, last.val_unauth_acc);
            }
            println!("checkpoint\t{}", r.checkpoint.display());
            println!("history\t{}", r.history_csv.display());
        }
        Command::Eval { checkpoint, mask } => {
            cfg.paths.checkpoint = checkpoint.or(cfg.paths.checkpoint);
            cfg.paths.mask = mask.or(cfg.paths.mask);
            for r in commands::cmd_eval(&cfg, out, &modes)? {
                println!("{:?}\t{}\t{:.4}", r.branch, r.mode, r.accuracy);
            }
        }
        Command::Sweep { checkpoint } => {
            cfg.paths.checkpoint = checkpoint.or(cfg.paths.checkpoint);
            if cli.mode.is_some() {
                cfg.sweep.modes = modes;
            }
            let r = commands::cmd_sweep(&cfg, out)?;
            println!("sweep\t{}", r.csv.display());
            println!("summary\t{}", r.summary_csv.display());
        }
        Command::Security { cells, levels } => {
            println!("log2_attempts\t{}", harness::security_complexity(cells, levels));
        }
        Command::EmitConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Io { .. } => 3,
                _ => 1,
            })
        }
    }
}
