// SPDX-License-Identifier: Apache-2.0

//! Differential orientation fine-tuning: dual forward passes through the
//! aged (authorized) and unaged (unauthorized) arrays, the adversarial loss,
//! straight-through backpropagation onto per-plane shadow weights, plus
//! baseline pretraining and evaluation.

pub mod backward;
pub mod loss;
pub mod network;
pub mod train;

pub use backward::{backward, forward_branch, BranchCache, DualForward, Gradients, TrainPath};
pub use loss::{cross_entropy, doft_loss, CapMode, DoftLoss, LossBreakdown, LossParams};
pub use network::{binary, Layer, Network};
pub use train::{
    evaluate, pretrain, train_doft, EpochRecord, History, LossKind, Optimizer, OptimizerKind,
    PretrainConfig, PretrainReport, TrainConfig,
};
