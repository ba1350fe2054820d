// SPDX-License-Identifier: Apache-2.0

//! Dual-branch objective: authorized cross-entropy minus `lambda` times the
//! capped unauthorized cross-entropy.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the cap on the adversarial term is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapMode {
    /// `mean_b min(CE_b, cap)`: samples that are already confidently wrong
    /// stop contributing, the rest keep being pushed.
    PerSample,
    /// `min(mean_b CE_b, cap)`.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub auth_ce: f64,
    /// Uncapped mean unauthorized cross-entropy (0 when the branch is off).
    pub unauth_ce: f64,
    /// The capped quantity that enters the objective.
    pub unauth_term: f64,
}

/// Loss value and its gradient with respect to each branch's integer scores.
#[derive(Debug, Clone)]
pub struct DoftLoss {
    pub breakdown: LossBreakdown,
    pub grad_auth: Array2<f32>,
    pub grad_unauth: Option<Array2<f32>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub lambda: f64,
    pub adv_cap: f64,
    pub cap_mode: CapMode,
    pub logit_scale: f32,
}

/// Per-sample cross-entropy and `d CE / d logits` (softmax minus one-hot).
pub fn cross_entropy(logits: ArrayView2<'_, f32>, labels: &[u8]) -> (Array1<f64>, Array2<f32>) {
    let mut ce = Array1::<f64>::zeros(logits.nrows());
    let mut grad = Array2::<f32>::zeros(logits.dim());
    for (b, row) in logits.outer_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let y = usize::from(labels[b]);
        ce[b] = z.ln() - (f64::from(row[y]) - m);
        for (k, e) in exps.iter().enumerate() {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad[(b, k)] = (e / z - onehot) as f32;
        }
    }
    (ce, grad)
}

/// Objective on integer class scores. `scores_unauth` may be omitted only when
/// `lambda == 0`.
pub fn doft_loss(
    scores_auth: ArrayView2<'_, f32>,
    scores_unauth: Option<ArrayView2<'_, f32>>,
    labels: &[u8],
    p: &LossParams,
) -> Result<DoftLoss> {
    let batch = scores_auth.nrows();
    if batch == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{batch} score rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= scores_auth.ncols()) {
        return Err(Error::InvalidArgument(format!("label {bad} has no score column")));
    }
    let scale = p.logit_scale;
    let inv_b = 1.0 / batch as f64;

    let (ce_a, g_a) = cross_entropy((&scores_auth * scale).view(), labels);
    let auth_ce = ce_a.sum() * inv_b;
    let grad_auth = g_a * (scale * inv_b as f32);

    let mut breakdown = LossBreakdown {
        total: auth_ce,
        auth_ce,
        unauth_ce: 0.0,
        unauth_term: 0.0,
    };
    let grad_unauth = match scores_unauth {
        Some(su) => {
            if su.dim() != scores_auth.dim() {
                return Err(Error::Dimension(format!(
                    "branch score shapes differ: {:?} vs {:?}",
                    scores_auth.dim(),
                    su.dim()
                )));
            }
            let (ce_u, mut g_u) = cross_entropy((&su * scale).view(), labels);
            let unauth_ce = ce_u.sum() * inv_b;
            let (term, active): (f64, Vec<bool>) = match p.cap_mode {
                CapMode::PerSample => (
                    ce_u.iter().map(|&c| c.min(p.adv_cap)).sum::<f64>() * inv_b,
                    ce_u.iter().map(|&c| c < p.adv_cap).collect(),
                ),
                CapMode::Mean => (
                    unauth_ce.min(p.adv_cap),
                    vec![unauth_ce < p.adv_cap; batch],
                ),
            };
            let coeff = (-p.lambda * inv_b) as f32 * scale;
            for (mut row, on) in g_u.axis_iter_mut(Axis(0)).zip(active) {
                if on {
                    row *= coeff;
                } else {
                    row.fill(0.0);
                }
            }
            breakdown.unauth_ce = unauth_ce;
            breakdown.unauth_term = term;
            breakdown.total = auth_ce - p.lambda * term;
            Some(g_u)
        }
        None if p.lambda != 0.0 => return Err(Error::MissingCache("unauthorized")),
        None => None,
    };
    Ok(DoftLoss {
        breakdown,
        grad_auth,
        grad_unauth,
    })
}
