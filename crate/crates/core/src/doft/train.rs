// SPDX-License-Identifier: Apache-2.0

//! Baseline pretraining, DOFT fine-tuning and evaluation.

use std::path::Path;

use log::{debug, info};
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aging::AgingMask;
use crate::data::{Dataset, CLASS_COUNT};
use crate::doft::backward::{backward, backward_branch, forward_branch, forward_weights, DualForward, TrainPath};
use crate::doft::loss::{doft_loss, CapMode, LossParams};
use crate::doft::network::Network;
use crate::error::{Error, Result};
use crate::pim_sim::{argmax_rows, network_forward_batched, PimConfig, SimMode};
use crate::quantize::{code_limit, nearest_odd};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Upper bound on the unauthorized cross-entropy that enters the loss.
    pub adv_cap: f64,
    pub cap_mode: CapMode,
    pub patience: usize,
    /// Relative validation-loss improvement that counts as progress.
    pub min_delta: f64,
    /// Derived from the experiment root seed, not read from configuration.
    #[serde(skip)]
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// SGD only.
    pub momentum: f64,
    /// Decay the learning rate linearly to zero over the epoch budget.
    pub linear_decay: bool,
    /// Training images held out for plateau detection.
    pub validation: usize,
    /// Track hidden activation scales on the authorized branch.
    pub recalibrate: bool,
    /// Clamp shadow weights to `[-c, c]` after each step (0 = off).
    pub shadow_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            eta: 30.0,
            epochs: 12,
            batch_size: 100,
            loss: LossKind::CrossEntropy,
            adv_cap: default_adv_cap(CLASS_COUNT),
            cap_mode: CapMode::PerSample,
            patience: 3,
            min_delta: 1e-4,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            linear_decay: true,
            validation: 5000,
            recalibrate: true,
            shadow_clip: 0.0,
        }
    }
}

pub fn default_adv_cap(classes: usize) -> f64 {
    2.0 * (classes as f64).ln()
}

impl TrainConfig {
    /// Defaults tuned per weight precision.
    pub fn for_bits(q: u32) -> Self {
        if q == 1 {
            Self::default()
        } else {
            Self {
                eta: 0.01,
                epochs: 30,
                patience: 30,
                optimizer: OptimizerKind::Adam,
                shadow_clip: 1.0,
                ..Self::default()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.adv_cap > 0.0) {
            return bad("adv_cap must be > 0");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad("eta must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be >= 0");
        }
        if !(self.shadow_clip >= 0.0) {
            return bad("shadow_clip must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Derived from the experiment root seed, not read from configuration.
    #[serde(skip)]
    pub seed: u64,
    pub init_std: f64,
    pub init_logit_scale: f32,
    /// EMA momentum of the hidden activation scales.
    pub act_momentum: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            eta: 3e-3,
            epochs: 10,
            batch_size: 100,
            seed: 0,
            init_std: 0.1,
            init_logit_scale: (-6.0f32).exp(),
            act_momentum: 0.9,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "pretrain needs positive eta, epochs and batch_size".into(),
            ));
        }
        if !(self.init_logit_scale > 0.0) || !(0.0..1.0).contains(&self.act_momentum) {
            return Err(Error::InvalidArgument(
                "init_logit_scale must be > 0 and act_momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// First-order optimizer over a fixed list of flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    pub fn new(kind: OptimizerKind, momentum: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0f32; n]).collect();
        Self {
            kind,
            momentum: momentum as f32,
            step: 0,
            m: zeros(),
            v: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f32) {
        self.step += 1;
        let (c1, c2) = (
            1.0 - Self::BETA1.powi(self.step),
            1.0 - Self::BETA2.powi(self.step),
        );
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd if self.momentum == 0.0 => {
                    p.iter_mut().zip(g.iter()).for_each(|(w, &d)| *w -= lr * d);
                }
                OptimizerKind::Sgd => {
                    for ((w, &d), buf) in p.iter_mut().zip(g.iter()).zip(&mut self.m[k]) {
                        *buf = self.momentum * *buf + d;
                        *w -= lr * *buf;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (((w, &d), mi), vi) in p.iter_mut().zip(g.iter()).zip(m).zip(v) {
                        *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * d;
                        *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

fn flat_mut(a: &mut Array2<f32>) -> &mut [f32] {
    a.as_slice_mut().expect("standard layout")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auth_acc: f64,
    pub val_unauth_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (0-based) whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Top-1 accuracy of `net` on `ds` under the chosen simulator mode.
pub fn evaluate(
    net: &Network,
    ds: &Dataset,
    mask: Option<&AgingMask>,
    cfg: &PimConfig,
    mode: SimMode,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let cfg = pim_for(net, cfg)?;
    let (x, labels) = ds.all();
    let scores = network_forward_batched(net, mask, &cfg, mode, x.view())?;
    let correct = argmax_rows(scores.view())
        .iter()
        .zip(&labels)
        .filter(|(&p, &y)| p == usize::from(y))
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

fn check_mask(net: &Network, mask: &AgingMask) -> Result<()> {
    if mask.shapes() != net.shapes() || mask.q != net.q {
        return Err(Error::Dimension(format!(
            "mask covers {:?} at q={}, network is {:?} at q={}",
            mask.shapes(),
            mask.q,
            net.shapes(),
            net.q
        )));
    }
    Ok(())
}

fn pim_for(net: &Network, cfg: &PimConfig) -> Result<PimConfig> {
    let c = cfg.clone().with_bits(net.q, net.n);
    c.validate()?;
    Ok(c)
}

struct Validation {
    loss: f64,
    auth_acc: f64,
    unauth_acc: f64,
}

fn accuracy(scores: ArrayView2<'_, f32>, labels: &[u8]) -> usize {
    scores
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best == usize::from(y)
        })
        .count()
}

fn validate_doft(
    net: &Network,
    ds: &Dataset,
    mask: &AgingMask,
    params: &LossParams,
    cfg: &PimConfig,
) -> Result<Validation> {
    const CHUNK: usize = 1000;
    let (mut loss, mut auth, mut unauth) = (0.0, 0usize, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = ds.batch(chunk);
        let a = forward_branch(net, x.view(), Some(mask), cfg, TrainPath::Quantized)?;
        let u = forward_branch(net, x.view(), None, cfg, TrainPath::Quantized)?;
        let l = doft_loss(a.scores.view(), Some(u.scores.view()), &y, params)?;
        loss += l.breakdown.total * chunk.len() as f64;
        auth += accuracy(a.scores.view(), &y);
        unauth += accuracy(u.scores.view(), &y);
    }
    let n = ds.len() as f64;
    Ok(Validation {
        loss: loss / n,
        auth_acc: auth as f64 / n,
        unauth_acc: unauth as f64 / n,
    })
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "epoch", epoch as u64)));
    order
}

fn lr_at(eta: f64, epoch: usize, epochs: usize, decay: bool) -> f64 {
    if decay {
        eta * (1.0 - epoch as f64 / epochs as f64)
    } else {
        eta
    }
}

/// Fine-tune `net` so that it is accurate under `mask` and inaccurate without.
///
/// `train` is split into a training part and `cfg.validation` held-out images;
/// the weights with the lowest validation loss are returned.
pub fn train_doft(
    net: &Network,
    train: &Dataset,
    mask: &AgingMask,
    cfg: &TrainConfig,
    pim: &PimConfig,
) -> Result<(Network, History)> {
    cfg.validate()?;
    check_mask(net, mask)?;
    let pim = pim_for(net, pim)?;
    if cfg.validation == 0 || cfg.validation >= train.len() {
        return Err(Error::InvalidArgument(format!(
            "validation size {} must be in 1..{}",
            cfg.validation,
            train.len()
        )));
    }
    let (fit, held) = train.split_off(cfg.validation, seed::derive(cfg.seed, "validation", 0))?;
    let params = |net: &Network| LossParams {
        lambda: cfg.lambda,
        adv_cap: cfg.adv_cap,
        cap_mode: cfg.cap_mode,
        logit_scale: net.logit_scale,
    };

    let mut net = net.clone();
    net.seed = cfg.seed;
    let sizes: Vec<usize> = net
        .layers
        .iter()
        .flat_map(|l| l.shadow.iter().map(|s| s.len()).chain([l.bias.len()]))
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum, &sizes);

    let start = validate_doft(&net, &held, mask, &params(&net), &pim)?;
    info!(
        "doft start: val loss {:.4} auth {:.4} unauth {:.4}",
        start.loss, start.auth_acc, start.unauth_acc
    );
    let mut best_loss = start.loss;
    let mut best = net.clone();
    let mut history = History::default();
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.eta, epoch, cfg.epochs, cfg.linear_decay);
        let order = epoch_order(fit.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = fit.batch(idx);
            let auth = forward_branch(&net, x.view(), Some(mask), &pim, TrainPath::Quantized)?;
            let unauth = if cfg.lambda > 0.0 {
                Some(forward_branch(&net, x.view(), None, &pim, TrainPath::Quantized)?)
            } else {
                None
            };
            let loss = doft_loss(
                auth.scores.view(),
                unauth.as_ref().map(|u| u.scores.view()),
                &y,
                &params(&net),
            )?;
            let total = loss.breakdown.total;
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, loss: total });
            }
            if cfg.recalibrate {
                for (a, &m) in net.act_max.iter_mut().zip(&auth.hidden_max) {
                    if m > 0.0 {
                        *a = 0.9 * *a + 0.1 * m;
                    }
                }
            }
            let fwd = DualForward {
                auth: Some(auth),
                unauth,
            };
            let g = backward(
                &net,
                Some(mask),
                &fwd,
                loss.grad_auth.view(),
                loss.grad_unauth.as_ref().map(|g| g.view()),
                &pim,
            )?;
            if !g.is_finite() {
                return Err(Error::Diverged { epoch, loss: total });
            }
            let mut ps: Vec<&mut [f32]> = Vec::with_capacity(sizes.len());
            let mut gs: Vec<&[f32]> = Vec::with_capacity(sizes.len());
            for (layer, (gl, gb)) in net.layers.iter_mut().zip(g.shadow.iter().zip(&g.bias)) {
                for (s, gi) in layer.shadow.iter_mut().zip(gl) {
                    ps.push(flat_mut(s));
                    gs.push(gi.as_slice().expect("standard layout"));
                }
                ps.push(layer.bias.as_slice_mut().expect("contiguous"));
                gs.push(gb.as_slice().expect("contiguous"));
            }
            opt.step(&mut ps, &gs, lr as f32);
            if cfg.shadow_clip > 0.0 {
                let c = cfg.shadow_clip;
                for s in net.layers.iter_mut().flat_map(|l| l.shadow.iter_mut()) {
                    s.mapv_inplace(|v| v.clamp(-c, c));
                }
            }
            net.binarize_step();
            sum += total;
            batches += 1;
        }
        net.epoch = epoch + 1;
        let v = validate_doft(&net, &held, mask, &params(&net), &pim)?;
        if !v.loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: v.loss });
        }
        info!(
            "doft epoch {epoch}: train {:.4} val {:.4} auth {:.4} unauth {:.4}",
            sum / batches as f64,
            v.loss,
            v.auth_acc,
            v.unauth_acc
        );
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: sum / batches as f64,
            val_loss: v.loss,
            val_auth_acc: v.auth_acc,
            val_unauth_acc: v.unauth_acc,
        });
        if best_loss - v.loss > cfg.min_delta * best_loss.abs().max(1e-12) {
            best_loss = v.loss;
            best = net.clone();
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                debug!("validation plateau after epoch {epoch}");
                history.stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    Ok((best, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Quantization-aware training of a fresh network from `seed`.
///
/// Master weights live in `[-1, 1]`; the forward pass uses the nearest odd
/// code of `m * (2^q - 1)` and gradients pass straight through the rounding.
pub fn pretrain(
    widths: &[usize],
    q: u32,
    n: u32,
    train: &Dataset,
    cfg: &PretrainConfig,
    pim: &PimConfig,
) -> Result<(Network, PretrainReport)> {
    cfg.validate()?;
    if widths.len() < 2 || widths[0] != train.features() {
        return Err(Error::Dimension(format!(
            "widths {widths:?} do not start at {} features",
            train.features()
        )));
    }
    if *widths.last().expect("checked") < CLASS_COUNT {
        return Err(Error::Dimension("output width below class count".into()));
    }
    let pim = pim.clone().with_bits(q, n);
    pim.validate()?;
    let limit = code_limit(q) as f64;
    let mut rng = seed::rng(seed::derive(cfg.seed, "pretrain-init", 0));
    let normal = Normal::new(0.0, cfg.init_std)
        .map_err(|e| Error::InvalidArgument(format!("init_std: {e}")))?;
    let mut master: Vec<Array2<f32>> = widths
        .windows(2)
        .map(|w| Array2::from_shape_simple_fn((w[0], w[1]), || (normal.sample(&mut rng) as f32).clamp(-1.0, 1.0)))
        .collect();
    let mut biases: Vec<Array1<f32>> = widths[1..].iter().map(|&c| Array1::zeros(c)).collect();
    let mut log_scale = [cfg.init_logit_scale.ln()];
    let mut act_max = vec![0.0f32; widths.len() - 2];
    let to_codes = |m: &Array2<f32>| m.mapv(|v| nearest_odd(f64::from(v) * limit, q) as f32);

    let mut sizes: Vec<usize> = master.iter().map(|m| m.len()).collect();
    sizes.extend(biases.iter().map(|b| b.len()));
    sizes.push(1);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &sizes);
    let mut report = PretrainReport { epoch_loss: Vec::new() };

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.eta, epoch, cfg.epochs, true) as f32;
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(idx);
            let codes: Vec<Array2<f32>> = master.iter().map(to_codes).collect();
            let bias_refs: Vec<&Array1<f32>> = biases.iter().collect();
            let cache = forward_weights(
                codes,
                &bias_refs,
                &mut act_max,
                Some(cfg.act_momentum),
                n,
                x.view(),
                &pim,
                TrainPath::Quantized,
            )?;
            let scale = log_scale[0].exp();
            let loss = doft_loss(
                cache.scores.view(),
                None,
                &y,
                &LossParams {
                    lambda: 0.0,
                    adv_cap: 1.0,
                    cap_mode: CapMode::PerSample,
                    logit_scale: scale,
                },
            )?;
            let total = loss.breakdown.total;
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, loss: total });
            }
            // d CE / d log(scale) = sum(dCE/dscores * scores)
            let g_log = [(&loss.grad_auth * &cache.scores).sum()];
            let (gw, gb) = backward_branch(&cache, loss.grad_auth.view(), &pim)?;
            let mut ps: Vec<&mut [f32]> = master.iter_mut().map(flat_mut).collect();
            ps.extend(biases.iter_mut().map(|b| b.as_slice_mut().expect("contiguous")));
            ps.push(&mut log_scale);
            let mut gs: Vec<&[f32]> = gw.iter().map(|g| g.as_slice().expect("standard layout")).collect();
            gs.extend(gb.iter().map(|g| g.as_slice().expect("contiguous")));
            gs.push(&g_log);
            opt.step(&mut ps, &gs, lr);
            for m in &mut master {
                m.mapv_inplace(|v| v.clamp(-1.0, 1.0));
            }
            sum += total;
            batches += 1;
        }
        let mean = sum / batches as f64;
        info!("pretrain epoch {epoch}: loss {mean:.4}");
        report.epoch_loss.push(mean);
    }

    let codes: Vec<Array2<i64>> = master
        .iter()
        .map(|m| m.mapv(|v| nearest_odd(f64::from(v) * limit, q)))
        .collect();
    let mut net = Network::from_codes(widths, q, n, &codes, biases, act_max, log_scale[0].exp())?;
    net.seed = cfg.seed;
    net.epoch = cfg.epochs;
    Ok((net, report))
}
