// SPDX-License-Identifier: Apache-2.0

//! Command implementations behind the CLI. Each writes its artifacts into an
//! output directory and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::aging::{
    apply_process_variation, generate_mask, generate_shared_mask, load_mask, natural_drift, save_mask, AgingMask,
};
use crate::data::{load_mnist, subsample, Dataset, Split};
use crate::doft::{evaluate, pretrain, train_doft, History, Network};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::sweep::{run_sweep, summarize, write_rows, Branch, SweepRecord};
use crate::pim_sim::SimMode;
use crate::seed;

pub const PRETRAINED_CKPT: &str = "pretrained.ckpt";
pub const DOFT_CKPT: &str = "doft.ckpt";
pub const MASK_FILE: &str = "aging.mask";
pub const HISTORY_CSV: &str = "history.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SUMMARY_CSV: &str = "sweep_summary.csv";

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn limited(ds: Dataset, limit: usize, stratified: bool, seed: u64) -> Result<Dataset> {
    if limit == 0 || limit >= ds.len() {
        Ok(ds)
    } else {
        subsample(&ds, limit, seed, stratified)
    }
}

pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let ds = load_mnist(&cfg.data.mnist_dir, split)?;
    let (limit, index) = match split {
        Split::Train => (cfg.data.train_limit, 0),
        Split::Test => (cfg.data.test_limit, 1),
    };
    limited(ds, limit, cfg.data.stratified, seed::derive(cfg.seed, "subsample", index))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .ok_or_else(|| Error::Config(format!("paths.{what} is required for this command")))?;
    if !p.exists() {
        return Err(Error::Config(format!("paths.{what} {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn load_checkpoint(cfg: &ExperimentConfig) -> Result<Network> {
    let net = Network::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    if net.widths != cfg.model.widths || net.q != cfg.model.q || net.n != cfg.model.n {
        return Err(Error::Config(format!(
            "checkpoint is {:?} q={} n={}, config says {:?} q={} n={}",
            net.widths, net.q, net.n, cfg.model.widths, cfg.model.q, cfg.model.n
        )));
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub test_accuracy: f64,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainOutcome> {
    ensure_dir(out)?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let mut pc = cfg.pretrain.clone();
    pc.seed = seed::derive(cfg.seed, "pretrain", 0);
    let (net, _) = pretrain(&cfg.model.widths, cfg.model.q, cfg.model.n, &train, &pc, &cfg.pim())?;
    let test_accuracy = evaluate(&net, &test, None, &cfg.pim(), SimMode::Functional)?;
    info!("pretrained test accuracy {test_accuracy:.4}");
    let checkpoint = out.join(PRETRAINED_CKPT);
    net.save(&checkpoint)?;
    Ok(PretrainOutcome {
        checkpoint,
        test_accuracy,
    })
}

/// The configured aging key, with every transform applied in order:
/// generation, layer restriction, process variation, natural drift.
pub fn build_mask(cfg: &ExperimentConfig) -> Result<AgingMask> {
    let shapes = cfg.model.shapes();
    let s = seed::derive(cfg.seed, "mask", 0);
    let a = &cfg.aging;
    let mut mask = if a.shared_prototype {
        generate_shared_mask(&shapes, cfg.model.q, a.sigma, a.alpha, s)?
    } else {
        generate_mask(&shapes, cfg.model.q, a.sigma, a.alpha, s)?
    };
    if a.layers.is_some() {
        mask = mask.restrict_to_layers(&cfg.aged_layers());
    }
    if a.process_variation > 0.0 {
        mask = apply_process_variation(&mask, a.process_variation, seed::derive(cfg.seed, "process-variation", 0))?;
    }
    if a.natural_drift > 0.0 {
        mask = natural_drift(&mask, a.natural_drift)?;
    }
    Ok(mask)
}

pub fn cmd_agegen(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    let mask = build_mask(cfg)?;
    let path = out.join(MASK_FILE);
    save_mask(&mask, &path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoftOutcome {
    pub checkpoint: PathBuf,
    pub history_csv: PathBuf,
    pub history: History,
}

pub fn cmd_doft(cfg: &ExperimentConfig, out: &Path) -> Result<DoftOutcome> {
    ensure_dir(out)?;
    let net = load_checkpoint(cfg)?;
    let mask = load_mask(required(&cfg.paths.mask, "mask")?)?;
    let train = load_split(cfg, Split::Train)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed::derive(cfg.seed, "doft", 0);
    let (tuned, history) = train_doft(&net, &train, &mask, &tc, &cfg.pim())?;
    let checkpoint = out.join(DOFT_CKPT);
    tuned.save(&checkpoint)?;
    let history_csv = out.join(HISTORY_CSV);
    history.write_csv(&history_csv)?;
    Ok(DoftOutcome {
        checkpoint,
        history_csv,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub branch: Branch,
    pub mode: SimMode,
    pub accuracy: f64,
}

/// Accuracy on the test split for both branches in each requested mode.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, modes: &[SimMode]) -> Result<Vec<EvalRecord>> {
    ensure_dir(out)?;
    let net = load_checkpoint(cfg)?;
    let mask = load_mask(required(&cfg.paths.mask, "mask")?)?;
    let test = load_split(cfg, Split::Test)?;
    let mut rows = Vec::new();
    for &mode in modes {
        for (branch, m) in [(Branch::Authorized, Some(&mask)), (Branch::Unauthorized, None)] {
            rows.push(EvalRecord {
                branch,
                mode,
                accuracy: evaluate(&net, &test, m, &cfg.pim(), mode)?,
            });
        }
    }
    write_rows(&rows, &out.join(EVAL_CSV))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRecord>,
    pub csv: PathBuf,
    pub summary_csv: PathBuf,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepOutcome> {
    cfg.validate_sweep()?;
    ensure_dir(out)?;
    let net = load_checkpoint(cfg)?;
    let test = load_split(cfg, Split::Test)?;
    let train = if cfg.sweep.retrain {
        Some(load_split(cfg, Split::Train)?)
    } else {
        None
    };
    let rows = run_sweep(cfg, &net, train.as_ref(), &test)?;
    let csv = out.join(SWEEP_CSV);
    write_rows(&rows, &csv)?;
    let summary_csv = out.join(SUMMARY_CSV);
    write_rows(&summarize(&rows), &summary_csv)?;
    Ok(SweepOutcome {
        rows,
        csv,
        summary_csv,
    })
}
