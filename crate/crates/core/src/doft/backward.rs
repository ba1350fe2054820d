// SPDX-License-Identifier: Apache-2.0

//! Training-time forward pass with caches, and manual backpropagation.
//!
//! The quantized path mirrors the functional simulator exactly: inputs and
//! hidden activations are re-quantized to `n` bits, the MAC is floored to ADC
//! codes and biases are rounded to codes. Gradients pass through `Binary`,
//! the floor and the rounding unchanged (straight-through), and through the
//! activation re-quantizer wherever it did not clamp.
//!
//! The smooth path drops every quantizer (shadow weights are used directly,
//! no floor, no rounding, no clamping) so that the chain rule can be checked
//! against finite differences.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::aging::{AgingMask, LayerMask};
use crate::doft::network::Network;
use crate::error::{Error, Result};
use crate::pim_sim::{bias_codes, effective_weights, functional_mac, PimConfig};
use crate::quantize::{code_limit, quantize_inputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPath {
    Quantized,
    /// No quantization anywhere; for gradient verification.
    Smooth,
}

/// Per-branch activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    /// Input to each layer (code units).
    pub inputs: Vec<Array2<f32>>,
    /// Effective (degree-scaled) weights used by each layer.
    pub weights: Vec<Array2<f32>>,
    /// `d a / d z` for each hidden layer.
    pub act_grad: Vec<Array2<f32>>,
    /// Largest hidden post-activation value per hidden layer in this batch.
    pub hidden_max: Vec<f32>,
    /// Final-layer integer scores.
    pub scores: Array2<f32>,
    /// Whether the branch ran on the aged mask.
    pub aged: bool,
}

/// Caches for both branches of one minibatch.
#[derive(Debug, Clone, Default)]
pub struct DualForward {
    pub auth: Option<BranchCache>,
    pub unauth: Option<BranchCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `[layer][bit index]`, same shapes as the shadow weights.
    pub shadow: Vec<Vec<Array2<f32>>>,
    pub bias: Vec<Array1<f32>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            shadow: net
                .layers
                .iter()
                .map(|l| l.shadow.iter().map(|s| Array2::zeros(s.dim())).collect())
                .collect(),
            bias: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.shadow
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .chain(self.bias.iter().flat_map(|b| b.iter()))
            .all(|v| v.is_finite())
    }
}

fn layer_weights(net: &Network, l: usize, mask: Option<&LayerMask>, path: TrainPath) -> Array2<f32> {
    let layer = &net.layers[l];
    match path {
        TrainPath::Quantized => effective_weights(&layer.planes, mask),
        TrainPath::Smooth => {
            let mut out = Array2::<f32>::zeros(layer.planes.dim());
            for (i, s) in layer.shadow.iter().enumerate() {
                let sig = (1u64 << i) as f32;
                match mask {
                    Some(m) => Zip::from(&mut out)
                        .and(s)
                        .and(m.plane(i))
                        .for_each(|o, &w, &d| *o += sig * w * d),
                    None => Zip::from(&mut out).and(s).for_each(|o, &w| *o += sig * w),
                }
            }
            out
        }
    }
}

/// Forward one branch on pixel rows in `[0, 1]`.
pub fn forward_branch(
    net: &Network,
    pixels: ArrayView2<'_, f32>,
    mask: Option<&AgingMask>,
    cfg: &PimConfig,
    path: TrainPath,
) -> Result<BranchCache> {
    if let Some(m) = mask {
        if m.shapes() != net.shapes() || m.q != net.q {
            return Err(Error::Dimension("mask does not match the network".into()));
        }
    }
    let weights = (0..net.layers.len())
        .map(|l| layer_weights(net, l, mask.map(|m| &m.layers[l]), path))
        .collect();
    let biases: Vec<&Array1<f32>> = net.layers.iter().map(|l| &l.bias).collect();
    let mut act_max = net.act_max.clone();
    let mut cache = forward_weights(weights, &biases, &mut act_max, None, net.n, pixels, cfg, path)?;
    cache.aged = mask.is_some();
    Ok(cache)
}

/// Forward through explicit per-layer weights. With `ema = Some(m)` each
/// hidden scale is first updated to `m * old + (1 - m) * batch_max` (or set to
/// the batch max while still zero).
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_weights(
    weights: Vec<Array2<f32>>,
    biases: &[&Array1<f32>],
    act_max: &mut [f32],
    ema: Option<f32>,
    n: u32,
    pixels: ArrayView2<'_, f32>,
    cfg: &PimConfig,
    path: TrainPath,
) -> Result<BranchCache> {
    if pixels.ncols() != weights[0].nrows() {
        return Err(Error::Dimension(format!(
            "batch has {} features, network expects {}",
            pixels.ncols(),
            weights[0].nrows()
        )));
    }
    let top = code_limit(n) as f32;
    let ratio = cfg.lsb_per_cell() as f32;
    let last = weights.len() - 1;

    let mut x = match path {
        TrainPath::Quantized => quantize_inputs(pixels, n)?.to_f32(),
        TrainPath::Smooth => pixels.mapv(|p| p * top),
    };
    let mut cache = BranchCache {
        inputs: Vec::with_capacity(weights.len()),
        weights: Vec::with_capacity(weights.len()),
        act_grad: Vec::with_capacity(last),
        hidden_max: Vec::with_capacity(last),
        scores: Array2::zeros((0, 0)),
        aged: false,
    };
    for (l, w) in weights.into_iter().enumerate() {
        let z = match path {
            TrainPath::Quantized => {
                let b = bias_codes(biases[l].view()).mapv(|v| v as f32);
                functional_mac(x.view(), w.view(), ratio) + &b
            }
            TrainPath::Smooth => x.dot(&w) * ratio + biases[l],
        };
        cache.inputs.push(x);
        cache.weights.push(w);
        if l == last {
            cache.scores = z;
            break;
        }
        let relu = z.mapv(|v| v.max(0.0));
        let batch_max = relu.fold(0.0f32, |m, &v| m.max(v));
        cache.hidden_max.push(batch_max);
        if let Some(m) = ema {
            if batch_max > 0.0 {
                act_max[l] = if act_max[l] > 0.0 {
                    m * act_max[l] + (1.0 - m) * batch_max
                } else {
                    batch_max
                };
            }
        }
        let scale = act_max[l];
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "hidden layer {l} has no positive activation scale"
            )));
        }
        let (next, grad) = match path {
            TrainPath::Quantized => {
                let normalized = relu.mapv(|v| v / scale);
                let grad = Zip::from(&z)
                    .and(&normalized)
                    .map_collect(|&zv, &nv| if zv > 0.0 && nv <= 1.0 { top / scale } else { 0.0 });
                (quantize_inputs(normalized.view(), n)?.to_f32(), grad)
            }
            TrainPath::Smooth => (
                relu.mapv(|v| v / scale * top),
                z.mapv(|zv| if zv > 0.0 { top / scale } else { 0.0 }),
            ),
        };
        cache.act_grad.push(grad);
        x = next;
    }
    Ok(cache)
}

/// `(dL/dW_eff per layer, dL/dbias per layer)`.
pub type BranchGradients = (Vec<Array2<f32>>, Vec<Array1<f32>>);

/// Gradients of one branch.
pub fn backward_branch(
    cache: &BranchCache,
    grad_scores: ArrayView2<'_, f32>,
    cfg: &PimConfig,
) -> Result<BranchGradients> {
    if grad_scores.dim() != cache.scores.dim() {
        return Err(Error::Dimension(format!(
            "score gradient {:?} does not match cached scores {:?}",
            grad_scores.dim(),
            cache.scores.dim()
        )));
    }
    let ratio = cfg.lsb_per_cell() as f32;
    let layers = cache.inputs.len();
    let mut gw = Vec::with_capacity(layers);
    let mut gb = Vec::with_capacity(layers);
    let mut delta = grad_scores.to_owned();
    for l in (0..layers).rev() {
        gw.push(cache.inputs[l].t().dot(&delta) * ratio);
        gb.push(delta.sum_axis(Axis(0)));
        if l > 0 {
            let mut up = delta.dot(&cache.weights[l].t()) * ratio;
            up *= &cache.act_grad[l - 1];
            delta = up;
        }
    }
    gw.reverse();
    gb.reverse();
    Ok((gw, gb))
}

/// Combine branch gradients onto the shadow weights:
/// `dL/dw_fp[i] = 2^(i-1) * (D[i] (.) G_auth + G_unauth)`; the straight-through
/// estimator takes `dL/dw_fp = dL/dw`.
pub fn backward(
    net: &Network,
    mask: Option<&AgingMask>,
    fwd: &DualForward,
    grad_auth: ArrayView2<'_, f32>,
    grad_unauth: Option<ArrayView2<'_, f32>>,
    cfg: &PimConfig,
) -> Result<Gradients> {
    let auth = fwd.auth.as_ref().ok_or(Error::MissingCache("authorized"))?;
    let (gw_a, gb_a) = backward_branch(auth, grad_auth, cfg)?;
    let unauth = match grad_unauth {
        Some(g) => {
            let cache = fwd.unauth.as_ref().ok_or(Error::MissingCache("unauthorized"))?;
            Some(backward_branch(cache, g, cfg)?)
        }
        None => None,
    };
    if auth.aged != mask.is_some() {
        return Err(Error::InvalidArgument(
            "authorized cache and mask disagree on whether the branch is aged".into(),
        ));
    }
    let aged = mask;

    let mut out = Gradients::zeros_like(net);
    for (l, layer) in net.layers.iter().enumerate() {
        for i in 0..layer.shadow.len() {
            let sig = (1u64 << i) as f32;
            let g = &mut out.shadow[l][i];
            match aged {
                Some(m) => Zip::from(&mut *g)
                    .and(&gw_a[l])
                    .and(m.layers[l].plane(i))
                    .for_each(|o, &ga, &d| *o = sig * d * ga),
                None => Zip::from(&mut *g).and(&gw_a[l]).for_each(|o, &ga| *o = sig * ga),
            }
            if let Some((gw_u, _)) = &unauth {
                g.scaled_add(sig, &gw_u[l]);
            }
        }
        out.bias[l] = gb_a[l].clone();
        if let Some((_, gb_u)) = &unauth {
            out.bias[l] += &gb_u[l];
        }
    }
    Ok(out)
}
