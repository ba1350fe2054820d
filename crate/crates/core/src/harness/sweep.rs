// SPDX-License-Identifier: Apache-2.0

//! Grid sweeps over aging ratio, degree, aged-layer count and `lambda`.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aging::{apply_process_variation, generate_mask, generate_shared_mask, natural_drift, AgingMask};
use crate::data::Dataset;
use crate::doft::{evaluate, train_doft, Network};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::pim_sim::SimMode;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Authorized,
    Unauthorized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub sigma: f64,
    pub alpha: f64,
    pub aged_layers: usize,
    pub lambda: f64,
}

/// One `sweep.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sigma: f64,
    pub alpha: f64,
    pub aged_layers: usize,
    pub lambda: f64,
    pub branch: Branch,
    pub mode: SimMode,
    pub accuracy: Option<f64>,
    /// Seed of the mask used by this row.
    pub seed: u64,
    pub trial: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub sigma: f64,
    pub alpha: f64,
    pub aged_layers: usize,
    pub lambda: f64,
    pub branch: Branch,
    pub mode: SimMode,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub errors: usize,
}

pub fn grid(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for &sigma in &s.sigma {
        for &alpha in &s.alpha {
            for &aged_layers in &s.aged_layers {
                for &lambda in &s.lambda {
                    out.push(GridPoint {
                        sigma,
                        alpha,
                        aged_layers,
                        lambda,
                    });
                }
            }
        }
    }
    out
}

/// Mask seed of trial `t`. Shared across grid points so that every point sees
/// the same random streams.
pub fn trial_seed(root: u64, trial: usize) -> u64 {
    seed::derive(root, "trial", trial as u64)
}

/// Mask for one grid point and trial, with the configured transforms.
pub fn trial_mask(cfg: &ExperimentConfig, p: &GridPoint, trial: usize) -> Result<AgingMask> {
    let shapes = cfg.model.shapes();
    let s = trial_seed(cfg.seed, trial);
    let mut mask = if cfg.aging.shared_prototype {
        generate_shared_mask(&shapes, cfg.model.q, p.sigma, p.alpha, s)?
    } else {
        generate_mask(&shapes, cfg.model.q, p.sigma, p.alpha, s)?
    };
    mask = mask.restrict_to_layers(&(0..p.aged_layers).collect::<Vec<_>>());
    if cfg.aging.process_variation > 0.0 {
        mask = apply_process_variation(&mask, cfg.aging.process_variation, seed::derive(s, "process-variation", 0))?;
    }
    if cfg.aging.natural_drift > 0.0 {
        mask = natural_drift(&mask, cfg.aging.natural_drift)?;
    }
    Ok(mask)
}

fn run_trial(
    cfg: &ExperimentConfig,
    net: &Network,
    train: Option<&Dataset>,
    test: &Dataset,
    p: &GridPoint,
    trial: usize,
) -> Vec<SweepRecord> {
    let mask_seed = trial_seed(cfg.seed, trial);
    let row = |branch, mode, accuracy, error: String| SweepRecord {
        sigma: p.sigma,
        alpha: p.alpha,
        aged_layers: p.aged_layers,
        lambda: p.lambda,
        branch,
        mode,
        accuracy,
        seed: mask_seed,
        trial,
        error,
    };
    let attempt = || -> Result<Vec<(Branch, SimMode, f64)>> {
        let mask = trial_mask(cfg, p, trial)?;
        let tuned;
        let model = match (cfg.sweep.retrain, train) {
            (true, Some(train)) => {
                let mut tc = cfg.train.clone();
                tc.lambda = p.lambda;
                tc.seed = seed::derive(mask_seed, "doft", 0);
                tuned = train_doft(net, train, &mask, &tc, &cfg.pim())?.0;
                &tuned
            }
            (true, None) => return Err(Error::Empty("training set for retraining sweep")),
            (false, _) => net,
        };
        let mut out = Vec::new();
        for &mode in &cfg.sweep.modes {
            out.push((Branch::Authorized, mode, evaluate(model, test, Some(&mask), &cfg.pim(), mode)?));
            out.push((Branch::Unauthorized, mode, evaluate(model, test, None, &cfg.pim(), mode)?));
        }
        Ok(out)
    };
    match attempt() {
        Ok(results) => results
            .into_iter()
            .map(|(b, m, a)| row(b, m, Some(a), String::new()))
            .collect(),
        Err(e) => {
            warn!("grid point {p:?} trial {trial}: {e}");
            let msg = format!("{}: {e}", e.category());
            cfg.sweep
                .modes
                .iter()
                .flat_map(|&m| {
                    [
                        row(Branch::Authorized, m, None, msg.clone()),
                        row(Branch::Unauthorized, m, None, msg.clone()),
                    ]
                })
                .collect()
        }
    }
}

/// Run the full grid. Per-point failures become rows with an error message.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    net: &Network,
    train: Option<&Dataset>,
    test: &Dataset,
) -> Result<Vec<SweepRecord>> {
    cfg.validate_sweep()?;
    let mut rows = Vec::new();
    for p in grid(cfg) {
        info!("sweep point {p:?}");
        let per_trial: Vec<Vec<SweepRecord>> = (0..cfg.sweep.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, net, train, test, &p, t))
            .collect();
        rows.extend(per_trial.into_iter().flatten());
    }
    Ok(rows)
}

pub fn summarize(rows: &[SweepRecord]) -> Vec<SummaryRecord> {
    type Key = (u64, u64, usize, u64, Branch, u8);
    let mut groups: BTreeMap<Key, (SweepRecord, Vec<f64>, usize)> = BTreeMap::new();
    let mut order: Vec<Key> = Vec::new();
    for r in rows {
        let key = (
            r.sigma.to_bits(),
            r.alpha.to_bits(),
            r.aged_layers,
            r.lambda.to_bits(),
            r.branch,
            r.mode as u8,
        );
        let entry = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (r.clone(), Vec::new(), 0)
        });
        match r.accuracy {
            Some(a) => entry.1.push(a),
            None => entry.2 += 1,
        }
    }
    order
        .into_iter()
        .map(|k| {
            let (r, accs, errors) = &groups[&k];
            let n = accs.len();
            let mean = if n > 0 { accs.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRecord {
                sigma: r.sigma,
                alpha: r.alpha,
                aged_layers: r.aged_layers,
                lambda: r.lambda,
                branch: r.branch,
                mode: r.mode,
                mean,
                std,
                trials: n,
                errors: *errors,
            }
        })
        .collect()
}

pub fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
