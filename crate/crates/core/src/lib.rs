// SPDX-License-Identifier: Apache-2.0

//! Behavioral simulator for aged SRAM process-in-memory DNN accelerators and
//! a differential orientation fine-tuning (DOFT) engine.
//!
//! Weights are stored as `q` stacks of ±1 bit planes, one SRAM array per bit
//! index. Deliberately aged cells read back a fraction `alpha` of the unaged
//! read-voltage step, so the per-plane aging mask acts as a hardware key: a
//! network fine-tuned against the mask keeps its accuracy on the aged
//! ("authorized") chip and collapses on any unaged ("unauthorized") platform.
//!
//! Module map:
//! - [`quantize`]: bit-sliced weights and bit-serial inputs.
//! - [`aging`]: mask generation, array reuse, process variation, natural aging, mask files.
//! - [`pim_sim`]: ADC model, bit-exact tiled forward pass and the lumped functional model.
//! - [`doft`]: network, loss, manual backprop with straight-through estimators, training loops.
//! - [`data`]: IDX loading and deterministic subsampling.
//! - [`harness`]: experiment configuration, sweeps, CLI command implementations.

// NaN-rejecting `!(x > 0.0)` checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aging;
pub mod data;
pub mod doft;
pub mod error;
pub mod harness;
pub mod pim_sim;
pub mod quantize;
pub mod seed;

pub use error::{Error, Result};
pub use ndarray;
