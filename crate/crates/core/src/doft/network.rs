// SPDX-License-Identifier: Apache-2.0

//! Fully-connected network with per-bit-plane shadow weights, and the `.ckpt`
//! file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::aging::{read_f32_le, split_framed};
use crate::error::{Error, Result};
use crate::pim_sim::Activation;
use crate::quantize::{code_limit, BitPlanes};

/// `Binary(x)`: +1 for `x >= 0`, -1 otherwise.
pub fn binary(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Full-precision shadow weight per bit index.
    pub shadow: Vec<Array2<f32>>,
    /// `Binary(shadow)`, the planes programmed into the arrays.
    pub planes: BitPlanes,
    /// Digital bias in ADC-code units.
    pub bias: Array1<f32>,
    pub activation: Activation,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.planes.rows()
    }

    pub fn width(&self) -> usize {
        self.planes.cols()
    }

    fn refresh_planes(&mut self) {
        for (plane, w) in self.planes.planes_mut().iter_mut().zip(&self.shadow) {
            plane.zip_mut_with(w, |b, &s| *b = binary(s));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub q: u32,
    pub n: u32,
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Per hidden layer: post-activation value mapped to the top input code.
    pub act_max: Vec<f32>,
    /// Multiplier from integer scores to softmax logits (training only).
    pub logit_scale: f32,
    pub seed: u64,
    pub epoch: usize,
}

impl Network {
    /// Build from per-layer integer weight codes; shadow weights start at the
    /// binarized bits themselves (the `Binary` fixed point).
    pub fn from_codes(
        widths: &[usize],
        q: u32,
        n: u32,
        codes: &[Array2<i64>],
        biases: Vec<Array1<f32>>,
        act_max: Vec<f32>,
        logit_scale: f32,
    ) -> Result<Self> {
        if widths.len() < 2 || codes.len() != widths.len() - 1 || biases.len() != codes.len() {
            return Err(Error::Dimension(
                "widths, weight codes and biases disagree on layer count".into(),
            ));
        }
        if act_max.len() != codes.len() - 1 || act_max.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidArgument(
                "need one positive activation scale per hidden layer".into(),
            ));
        }
        let scale = 1.0 / code_limit(q) as f32;
        let last = codes.len() - 1;
        let layers = codes
            .iter()
            .zip(biases)
            .enumerate()
            .map(|(l, (c, bias))| {
                if c.dim() != (widths[l], widths[l + 1]) || bias.len() != widths[l + 1] {
                    return Err(Error::Dimension(format!(
                        "layer {l}: weights {:?}, bias {} for widths {}->{}",
                        c.dim(),
                        bias.len(),
                        widths[l],
                        widths[l + 1]
                    )));
                }
                let planes = BitPlanes::from_codes(c.view(), q, scale)?;
                Ok(Layer {
                    shadow: planes.planes().to_vec(),
                    planes,
                    bias,
                    activation: if l == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            q,
            n,
            widths: widths.to_vec(),
            layers,
            act_max,
            logit_scale,
            seed: 0,
            epoch: 0,
        })
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.planes.dim()).collect()
    }

    pub fn class_count(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Re-derive every bit plane from its shadow weights.
    pub fn binarize_step(&mut self) {
        for layer in &mut self.layers {
            layer.refresh_planes();
        }
    }

    /// True when every plane equals `Binary(shadow)`.
    pub fn planes_consistent(&self) -> bool {
        self.layers.iter().all(|l| {
            l.shadow
                .iter()
                .zip(l.planes.planes())
                .all(|(s, p)| s.iter().zip(p.iter()).all(|(&w, &b)| binary(w) == b))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            version: CKPT_VERSION,
            widths: self.widths.clone(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            q: self.q,
            n: self.n,
            act_max: self.act_max.clone(),
            logit_scale: self.logit_scale,
            weight_scale: self.layers[0].planes.scale,
            seed: self.seed,
            epoch: self.epoch,
        };
        let mut buf = Vec::new();
        writeln!(buf, "{CKPT_MAGIC}").expect("vec write");
        serde_json::to_writer(&mut buf, &header).expect("header serializes");
        buf.push(b'\n');
        for layer in &self.layers {
            for plane in &layer.shadow {
                for &v in plane.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            for &b in layer.bias.iter() {
                buf.extend_from_slice(&b.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, payload) = split_framed(&bytes, CKPT_MAGIC, path)?;
        let h: CheckpointHeader = serde_json::from_slice(header)
            .map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;
        if h.version != CKPT_VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: h.version,
                expected: CKPT_VERSION,
            });
        }
        let layer_count = h.widths.len().saturating_sub(1);
        if layer_count == 0 || h.activations.len() != layer_count || h.act_max.len() != layer_count - 1
        {
            return Err(Error::Dimension(
                "checkpoint header lists inconsistent layer counts".into(),
            ));
        }
        let expected: usize = h
            .widths
            .windows(2)
            .map(|w| (w[0] * w[1] * h.q as usize + w[1]) * 4)
            .sum();
        if payload.len() != expected {
            return Err(Error::corrupt(
                path,
                format!("payload is {} bytes, header implies {expected}", payload.len()),
            ));
        }
        let mut values = read_f32_le(payload);
        let mut layers = Vec::with_capacity(layer_count);
        for (l, w) in h.widths.windows(2).enumerate() {
            let (rows, cols) = (w[0], w[1]);
            let shadow: Vec<Array2<f32>> = (0..h.q)
                .map(|_| {
                    let v: Vec<f32> = values.by_ref().take(rows * cols).collect();
                    Array2::from_shape_vec((rows, cols), v).expect("length checked")
                })
                .collect();
            let bias = Array1::from_iter(values.by_ref().take(cols));
            if shadow.iter().flat_map(|s| s.iter()).chain(bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::corrupt(path, format!("layer {l} holds non-finite values")));
            }
            let planes = BitPlanes::from_planes(
                shadow.iter().map(|s| s.mapv(binary)).collect(),
                h.weight_scale,
            )?;
            layers.push(Layer {
                shadow,
                planes,
                bias,
                activation: h.activations[l],
            });
        }
        Ok(Self {
            q: h.q,
            n: h.n,
            widths: h.widths,
            layers,
            act_max: h.act_max,
            logit_scale: h.logit_scale,
            seed: h.seed,
            epoch: h.epoch,
        })
    }
}

const CKPT_MAGIC: &str = "PIMAGE-CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    q: u32,
    n: u32,
    act_max: Vec<f32>,
    logit_scale: f32,
    weight_scale: f32,
    seed: u64,
    epoch: usize,
}
