// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration, sweeps, the security calculator and the command
//! implementations used by the CLI.

pub mod commands;
pub mod config;
pub mod sweep;

use std::num::NonZeroU64;

pub use commands::{cmd_agegen, cmd_doft, cmd_eval, cmd_pretrain, cmd_sweep};
pub use config::{load_config, parse_config, ExperimentConfig};
pub use sweep::{run_sweep, summarize, Branch, SweepRecord};

/// Base-2 exponent of the exhaustive key-search cost `2^cells * levels`:
/// every cell is either aged or not, and an attacker must also guess the
/// degree among `levels` candidates.
pub fn security_complexity(sram_cells: NonZeroU64, degree_levels: NonZeroU64) -> f64 {
    sram_cells.get() as f64 + (degree_levels.get() as f64).log2()
}
