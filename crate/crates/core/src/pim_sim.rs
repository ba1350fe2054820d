// SPDX-License-Identifier: Apache-2.0

//! Forward model of an SRAM process-in-memory accelerator.
//!
//! Two evaluation paths share one set of weights:
//!
//! - **bit-exact**: the weight matrix is split into `array_rows`-high tiles.
//!   Every (tile, weight bit plane, input bit plane) triple produces one
//!   analog column voltage, which is digitized by the ADC (floor, then clamp
//!   to `[adc_min, adc_max]`) and shift-added digitally.
//! - **functional**: the lumped differentiable form used for training. The
//!   degree-scaled planes are collapsed into one effective weight matrix,
//!   multiplied with the multi-bit activations and floored once, with no
//!   per-tile clamping.
//!
//! With no aging and no per-tile saturation the two agree exactly; under aging
//! each ADC floor in the bit-exact path loses less than one LSB of its own
//! (shifted) significance.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aging::{AgingMask, LayerMask};
use crate::doft::network::Network;
use crate::error::{Error, Result};
use crate::quantize::{quantize_inputs, round_half_up, BitPlanes, InputPlanes};

/// Absolute tolerance (in LSBs) under which a bit-exact column reading is
/// treated as landing on an ADC threshold.
const ADC_SNAP_F64: f64 = 1e-9;
/// Same, for the `f32` functional path.
const ADC_SNAP_F32: f32 = 1e-3;

/// Samples per chunk when a batch is fanned out across threads.
pub const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PimConfig {
    pub array_rows: usize,
    pub array_cols: usize,
    pub adc_bits: u32,
    /// ADC read-voltage interval (V per output code).
    pub v_inter: f64,
    /// Unaged per-cell read-voltage step (V).
    pub v_cell: f64,
    pub adc_min: i64,
    pub adc_max: i64,
    /// Weight bits.
    pub q: u32,
    /// Input / activation bits.
    pub n: u32,
}

impl Default for PimConfig {
    fn default() -> Self {
        Self {
            array_rows: 64,
            array_cols: 64,
            adc_bits: 7,
            v_inter: 0.01,
            v_cell: 0.01,
            adc_min: -64,
            adc_max: 64,
            q: 1,
            n: 8,
        }
    }
}

impl PimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_inter > 0.0 && self.v_cell > 0.0) {
            return Err(Error::InvalidArgument(
                "v_inter and v_cell must be positive".into(),
            ));
        }
        if self.array_rows == 0 || self.array_cols == 0 {
            return Err(Error::InvalidArgument("array dimensions must be positive".into()));
        }
        if self.adc_min > self.adc_max {
            return Err(Error::InvalidArgument("adc_min exceeds adc_max".into()));
        }
        let levels = (self.adc_max - self.adc_min + 1) as u128;
        if self.adc_bits >= 64 || levels > (1u128 << self.adc_bits) + 1 {
            return Err(Error::InvalidArgument(format!(
                "ADC range [{}, {}] needs more than {} bits",
                self.adc_min, self.adc_max, self.adc_bits
            )));
        }
        Ok(())
    }

    /// ADC LSBs contributed by one unaged `+1` cell with its word line on.
    pub fn lsb_per_cell(&self) -> f64 {
        self.v_cell / self.v_inter
    }

    pub fn with_bits(mut self, q: u32, n: u32) -> Self {
        self.q = q;
        self.n = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: i64) -> i64 {
        match self {
            Activation::Relu => x.max(0),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    BitExact,
    Functional,
}

impl SimMode {
    pub const ALL: [SimMode; 2] = [SimMode::BitExact, SimMode::Functional];

    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::BitExact => "bitexact",
            SimMode::Functional => "functional",
        }
    }
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitexact" => Ok(SimMode::BitExact),
            "functional" => Ok(SimMode::Functional),
            other => Err(Error::InvalidArgument(format!(
                "unknown simulator mode {other:?} (expected bitexact or functional)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    /// Pre-activation codes: digitized MAC result plus the digital bias.
    pub pre: Array2<i64>,
    /// `h(pre)`.
    pub post: Array2<i64>,
    /// Per-tile ADC samples that hit the clamp (bit-exact mode only).
    pub saturated: usize,
}

fn floor_snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= ADC_SNAP_F64 {
        r
    } else {
        x.floor()
    }
}

pub(crate) fn floor_snapped_f32(x: f32) -> f32 {
    let r = x.round();
    if (x - r).abs() <= ADC_SNAP_F32 {
        r
    } else {
        x.floor()
    }
}

/// Digitize a column voltage: `clamp(floor(v / v_inter), adc_min, adc_max)`.
/// Readings within `1e-9` LSB of a threshold are taken as on it, so decimal
/// voltages such as `0.12 V / 0.01 V` read as 12 rather than 11.
pub fn adc(volts: f64, cfg: &PimConfig) -> i64 {
    adc_lsb(volts / cfg.v_inter, cfg).0
}

/// ADC on a reading already expressed in LSBs; also reports saturation.
fn adc_lsb(lsb: f64, cfg: &PimConfig) -> (i64, bool) {
    let raw = floor_snapped(lsb);
    let clamped = raw.clamp(cfg.adc_min as f64, cfg.adc_max as f64);
    (clamped as i64, clamped != raw)
}

/// Analog read of one column: `sum_p x_p * w_p * d_p * v_cell` volts.
pub fn column_dot(x: &[u8], w: &[i8], d: &[f32], cfg: &PimConfig) -> Result<f64> {
    if x.len() != w.len() || w.len() != d.len() {
        return Err(Error::Dimension(format!(
            "column operands have lengths {}, {}, {}",
            x.len(),
            w.len(),
            d.len()
        )));
    }
    if x.len() > cfg.array_rows {
        return Err(Error::Dimension(format!(
            "column of {} cells exceeds array height {}",
            x.len(),
            cfg.array_rows
        )));
    }
    let sum: f64 = x
        .iter()
        .zip(w)
        .zip(d)
        .map(|((&x, &w), &d)| f64::from(x) * f64::from(w) * f64::from(d))
        .sum();
    Ok(sum * cfg.v_cell)
}

fn check_layer_shapes(
    input_cols: usize,
    weights: &BitPlanes,
    mask: Option<&LayerMask>,
    bias_len: usize,
) -> Result<()> {
    let (rows, cols) = weights.dim();
    if input_cols != rows {
        return Err(Error::Dimension(format!(
            "input width {input_cols} does not match layer fan-in {rows}"
        )));
    }
    if bias_len != cols {
        return Err(Error::Dimension(format!(
            "bias length {bias_len} does not match layer width {cols}"
        )));
    }
    if let Some(m) = mask {
        if m.dim() != weights.dim() || m.q() != weights.q() {
            return Err(Error::Dimension(format!(
                "mask {:?}x{} disagrees with weights {:?}x{}",
                m.dim(),
                m.q(),
                weights.dim(),
                weights.q()
            )));
        }
    }
    Ok(())
}

/// Digital bias in code units.
pub fn bias_codes(bias: ArrayView1<'_, f32>) -> Array1<i64> {
    bias.mapv(|b| round_half_up(f64::from(b)) as i64)
}

/// Bit-exact tiled forward pass for a batch of `n`-bit inputs.
pub fn layer_forward_bitexact(
    input: &InputPlanes,
    weights: &BitPlanes,
    mask: Option<&LayerMask>,
    bias: ArrayView1<'_, f32>,
    cfg: &PimConfig,
    activation: Activation,
) -> Result<LayerOutput> {
    cfg.validate()?;
    let (batch, fan_in) = input.dim();
    check_layer_shapes(fan_in, weights, mask, bias.len())?;
    let cols = weights.cols();
    let ratio = cfg.lsb_per_cell();

    let input_planes: Vec<Array2<f64>> = (0..input.n() as usize)
        .map(|j| input.plane(j).mapv(f64::from))
        .collect();
    let mut acc = Array2::<i64>::zeros((batch, cols));
    let mut saturated = 0usize;

    for i in 0..weights.q() as usize {
        let mut cell = weights.plane(i).mapv(f64::from);
        if let Some(m) = mask {
            Zip::from(&mut cell)
                .and(m.plane(i))
                .for_each(|c, &d| *c *= f64::from(d));
        }
        cell.mapv_inplace(|c| c * ratio);
        for start in (0..fan_in).step_by(cfg.array_rows) {
            let end = (start + cfg.array_rows).min(fan_in);
            let tile = cell.slice(s![start..end, ..]);
            for (j, xp) in input_planes.iter().enumerate() {
                let reading = xp.slice(s![.., start..end]).dot(&tile);
                let shift = i + j;
                Zip::from(&mut acc).and(&reading).for_each(|a, &r| {
                    let (code, sat) = adc_lsb(r, cfg);
                    saturated += usize::from(sat);
                    *a += code << shift;
                });
            }
        }
    }

    let bias = bias_codes(bias);
    let pre = acc + &bias;
    let post = pre.mapv(|v| activation.apply(v));
    Ok(LayerOutput {
        pre,
        post,
        saturated,
    })
}

/// `sum_i 2^(i-1) * D[i] (.) W[i]`; the unaged case when `mask` is `None`.
pub fn effective_weights(weights: &BitPlanes, mask: Option<&LayerMask>) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros(weights.dim());
    for (i, plane) in weights.planes().iter().enumerate() {
        let sig = (1u64 << i) as f32;
        match mask {
            Some(m) => Zip::from(&mut out)
                .and(plane)
                .and(m.plane(i))
                .for_each(|o, &w, &d| *o += sig * w * d),
            None => Zip::from(&mut out)
                .and(plane)
                .for_each(|o, &w| *o += sig * w),
        }
    }
    out
}

/// Lumped MAC in ADC codes, `floor(x . w_eff * v_cell / v_inter)`.
pub(crate) fn functional_mac(x: ArrayView2<'_, f32>, w_eff: ArrayView2<'_, f32>, ratio: f32) -> Array2<f32> {
    let mut out = x.dot(&w_eff);
    out.mapv_inplace(|v| floor_snapped_f32(v * ratio));
    out
}

/// Functional (training-time) forward pass on real-valued activations.
pub fn layer_forward_functional(
    input: ArrayView2<'_, f32>,
    weights: &BitPlanes,
    mask: Option<&LayerMask>,
    bias: ArrayView1<'_, f32>,
    cfg: &PimConfig,
    activation: Activation,
) -> Result<LayerOutput> {
    cfg.validate()?;
    check_layer_shapes(input.ncols(), weights, mask, bias.len())?;
    let w_eff = effective_weights(weights, mask);
    let mac = functional_mac(input, w_eff.view(), cfg.lsb_per_cell() as f32);
    let pre = mac.mapv(|v| v as i64) + &bias_codes(bias);
    let post = pre.mapv(|v| activation.apply(v));
    Ok(LayerOutput {
        pre,
        post,
        saturated: 0,
    })
}

fn check_network_mask(net: &Network, mask: Option<&AgingMask>) -> Result<()> {
    if let Some(m) = mask {
        if m.layers.len() != net.layers.len() {
            return Err(Error::Dimension(format!(
                "mask has {} layers, network has {}",
                m.layers.len(),
                net.layers.len()
            )));
        }
        if m.q != net.q {
            return Err(Error::Dimension(format!(
                "mask is for q={}, network uses q={}",
                m.q, net.q
            )));
        }
        for (l, (ml, nl)) in m.layers.iter().zip(&net.layers).enumerate() {
            if ml.dim() != nl.planes.dim() {
                return Err(Error::Dimension(format!(
                    "layer {l}: mask {:?} vs weights {:?}",
                    ml.dim(),
                    nl.planes.dim()
                )));
            }
        }
    }
    Ok(())
}

/// Class scores for a batch of pixel rows in `[0, 1]`. `mask = None` is the
/// unauthorized (unaged) chip.
pub fn network_forward(
    net: &Network,
    mask: Option<&AgingMask>,
    cfg: &PimConfig,
    mode: SimMode,
    pixels: ArrayView2<'_, f32>,
) -> Result<Array2<i64>> {
    if cfg.q != net.q || cfg.n != net.n {
        return Err(Error::Dimension(format!(
            "simulator configured for q={}, n={} but network uses q={}, n={}",
            cfg.q, cfg.n, net.q, net.n
        )));
    }
    check_network_mask(net, mask)?;
    let mut input = quantize_inputs(pixels, net.n)?;
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let lmask = mask.map(|m| &m.layers[l]);
        let out = match mode {
            SimMode::BitExact => layer_forward_bitexact(
                &input,
                &layer.planes,
                lmask,
                layer.bias.view(),
                cfg,
                layer.activation,
            )?,
            SimMode::Functional => layer_forward_functional(
                input.to_f32().view(),
                &layer.planes,
                lmask,
                layer.bias.view(),
                cfg,
                layer.activation,
            )?,
        };
        if l == last {
            return Ok(out.post);
        }
        let scale = net.act_max[l];
        let normalized = out.post.mapv(|v| v as f32 / scale);
        input = quantize_inputs(normalized.view(), net.n)?;
    }
    unreachable!("network has at least one layer")
}

/// [`network_forward`] over fixed-size chunks in parallel; rows come back in
/// input order regardless of thread count.
pub fn network_forward_batched(
    net: &Network,
    mask: Option<&AgingMask>,
    cfg: &PimConfig,
    mode: SimMode,
    pixels: ArrayView2<'_, f32>,
) -> Result<Array2<i64>> {
    let chunks: Vec<ArrayView2<'_, f32>> = pixels.axis_chunks_iter(Axis(0), EVAL_CHUNK).collect();
    let parts: Vec<Array2<i64>> = chunks
        .into_par_iter()
        .map(|c| network_forward(net, mask, cfg, mode, c))
        .collect::<Result<_>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::Dimension(format!("cannot stack chunk outputs: {e}")))
}

/// Index of the largest score per row; ties resolve to the lowest class.
pub fn argmax_rows(scores: ArrayView2<'_, i64>) -> Vec<usize> {
    scores
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
