// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration, read from TOML.
//!
//! Every table is optional and unknown keys are rejected. `emit-config`
//! prints the full default document:
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! mnist_dir = "data/mnist"
//!
//! [model]
//! widths = [784, 256, 10]
//! q = 1
//! n = 8
//!
//! [aging]
//! sigma = 0.9
//! alpha = 0.24
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::doft::{PretrainConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::pim_sim::{PimConfig, SimMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in a run.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub hardware: HardwareConfig,
    pub aging: AgingConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Use at most this many training images (0 = all).
    pub train_limit: usize,
    /// Use at most this many test images (0 = all).
    pub test_limit: usize,
    pub stratified: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit: 0,
            test_limit: 0,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    /// Weight bits.
    pub q: u32,
    /// Activation bits.
    pub n: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![784, 256, 10],
            q: 1,
            n: 8,
        }
    }
}

impl ModelConfig {
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }
}

/// Array and ADC parameters; bit widths come from [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub array_rows: usize,
    pub array_cols: usize,
    pub adc_bits: u32,
    pub v_inter: f64,
    pub v_cell: f64,
    pub adc_min: i64,
    pub adc_max: i64,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        let p = PimConfig::default();
        Self {
            array_rows: p.array_rows,
            array_cols: p.array_cols,
            adc_bits: p.adc_bits,
            v_inter: p.v_inter,
            v_cell: p.v_cell,
            adc_min: p.adc_min,
            adc_max: p.adc_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgingConfig {
    /// Fraction of cells aged in each plane.
    pub sigma: f64,
    /// Read-voltage fraction retained by an aged cell.
    pub alpha: f64,
    /// Aged layer indices; all layers when absent.
    pub layers: Option<Vec<usize>>,
    /// One prototype mask per bit index, shared by all layers.
    pub shared_prototype: bool,
    /// Relative std of per-cell process variation (0 = off).
    pub process_variation: f64,
    /// Uniform degree shrink from in-field aging (0 = off).
    pub natural_drift: f64,
}

impl Default for AgingConfig {
    fn default() -> Self {
        Self {
            sigma: 0.9,
            alpha: 0.24,
            layers: None,
            shared_prototype: false,
            process_variation: 0.0,
            natural_drift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Number of leading layers aged at each grid point.
    pub aged_layers: Vec<usize>,
    pub lambda: Vec<f64>,
    pub trials: usize,
    /// Re-run DOFT at every grid point and trial instead of reusing the checkpoint.
    pub retrain: bool,
    pub modes: Vec<SimMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sigma: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
            alpha: vec![0.24],
            aged_layers: vec![2],
            lambda: vec![0.05],
            trials: 20,
            retrain: false,
            modes: vec![SimMode::Functional],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Input checkpoint for `doft`, `eval` and `sweep`.
    pub checkpoint: Option<PathBuf>,
    /// Input mask for `doft` and `eval`.
    pub mask: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn pim(&self) -> PimConfig {
        let h = &self.hardware;
        PimConfig {
            array_rows: h.array_rows,
            array_cols: h.array_cols,
            adc_bits: h.adc_bits,
            v_inter: h.v_inter,
            v_cell: h.v_cell,
            adc_min: h.adc_min,
            adc_max: h.adc_max,
            q: self.model.q,
            n: self.model.n,
        }
    }

    /// Layers the mask covers with aging.
    pub fn aged_layers(&self) -> Vec<usize> {
        self.aging
            .layers
            .clone()
            .unwrap_or_else(|| (0..self.model.layer_count()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.widths.len() < 2 || self.model.widths.contains(&0) {
            return bad("model.widths needs at least two positive entries".into());
        }
        if !(1..=16).contains(&self.model.q) || !(1..=16).contains(&self.model.n) {
            return bad("model.q and model.n must be in 1..=16".into());
        }
        self.pim().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.aging.sigma) {
            return bad(format!("aging.sigma {} is outside [0, 1]", self.aging.sigma));
        }
        if !(self.aging.alpha > 0.0 && self.aging.alpha <= 1.0) {
            return bad(format!("aging.alpha {} is outside (0, 1]", self.aging.alpha));
        }
        if let Some(&l) = self.aged_layers().iter().find(|&&l| l >= self.model.layer_count()) {
            return bad(format!("aging.layers names layer {l}, model has {}", self.model.layer_count()));
        }
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.pretrain.validate().map_err(|e| Error::Config(format!("pretrain: {e}")))?;
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<()> {
        let s = &self.sweep;
        for (name, empty) in [
            ("sigma", s.sigma.is_empty()),
            ("alpha", s.alpha.is_empty()),
            ("aged_layers", s.aged_layers.is_empty()),
            ("lambda", s.lambda.is_empty()),
            ("modes", s.modes.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("sweep.{name} must not be empty")));
            }
        }
        if s.trials == 0 {
            return Err(Error::Config("sweep.trials must be positive".into()));
        }
        if let Some(&k) = s.aged_layers.iter().find(|&&k| k > self.model.layer_count()) {
            return Err(Error::Config(format!(
                "sweep.aged_layers entry {k} exceeds the {} model layers",
                self.model.layer_count()
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a configuration document. Errors carry the 1-based line number.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        let msg = e.message();
        match line {
            Some(l) => Error::Config(format!("{origin}:{l}: {msg}")),
            None => Error::Config(format!("{origin}: {msg}")),
        }
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_config(&text, &path.display().to_string())?;
    cfg.validate()?;
    Ok(cfg)
}
