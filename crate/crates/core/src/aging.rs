// SPDX-License-Identifier: Apache-2.0

//! Aging masks: the per-layer, per-bit-plane degree multipliers that form the
//! hardware key, plus the transforms applied to them (array reuse, process
//! variation, natural aging) and the `.mask` file format.
//!
//! A degree of `1.0` marks an unaged cell. An aged cell carries a degree in
//! `(0, 1)`: its read-voltage step is `degree * v_cell`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Floor applied when degrees are scaled down.
pub const MIN_DEGREE: f32 = 1e-6;

/// Largest `f32` strictly below 1.0. Aged cells never reach the unaged value.
pub const MAX_AGED_DEGREE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Degree planes for one layer, one per weight bit index.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    planes: Vec<Array2<f32>>,
}

impl LayerMask {
    pub fn new(planes: Vec<Array2<f32>>) -> Result<Self> {
        let Some(first) = planes.first() else {
            return Err(Error::Empty("layer mask"));
        };
        let dim = first.dim();
        if planes.iter().any(|p| p.dim() != dim) {
            return Err(Error::Dimension(
                "all degree planes of a layer must share one shape".into(),
            ));
        }
        if planes
            .iter()
            .flat_map(|p| p.iter())
            .any(|&d| !(d > 0.0 && d <= 1.0))
        {
            return Err(Error::InvalidArgument(
                "degrees must lie in (0, 1]".into(),
            ));
        }
        Ok(Self { planes })
    }

    /// All-unaged mask.
    pub fn unaged(rows: usize, cols: usize, q: u32) -> Self {
        Self {
            planes: vec![Array2::ones((rows, cols)); q as usize],
        }
    }

    pub fn plane(&self, i: usize) -> &Array2<f32> {
        &self.planes[i]
    }

    pub fn planes(&self) -> &[Array2<f32>] {
        &self.planes
    }

    pub fn dim(&self) -> (usize, usize) {
        self.planes[0].dim()
    }

    pub fn q(&self) -> u32 {
        self.planes.len() as u32
    }

    pub fn aged_count(&self, i: usize) -> usize {
        self.planes[i].iter().filter(|&&d| d != 1.0).count()
    }
}

/// Record of a transform applied after generation, kept in the file header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskTransform {
    SharedPrototype,
    ProcessVariation { rel_std: f64, seed: u64 },
    NaturalDrift { shrink: f64 },
}

/// Full aging key for a network.
#[derive(Debug, Clone, PartialEq)]
pub struct AgingMask {
    pub seed: u64,
    pub sigma: f64,
    pub alpha: f64,
    pub q: u32,
    pub layers: Vec<LayerMask>,
    pub transforms: Vec<MaskTransform>,
}

impl AgingMask {
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(LayerMask::dim).collect()
    }

    pub fn plane_count(&self) -> usize {
        self.layers.len() * self.q as usize
    }

    /// Unaged mask for the given layer shapes; numerically identical to
    /// running without a mask.
    pub fn unaged(shapes: &[(usize, usize)], q: u32) -> Self {
        Self {
            seed: 0,
            sigma: 0.0,
            alpha: 1.0,
            q,
            layers: shapes
                .iter()
                .map(|&(r, c)| LayerMask::unaged(r, c, q))
                .collect(),
            transforms: Vec::new(),
        }
    }

    /// Keep aging only on the listed layers; the rest become unaged.
    pub fn restrict_to_layers(&self, aged_layers: &[usize]) -> Self {
        let mut out = self.clone();
        for (l, layer) in out.layers.iter_mut().enumerate() {
            if !aged_layers.contains(&l) {
                let (r, c) = layer.dim();
                *layer = LayerMask::unaged(r, c, self.q);
            }
        }
        out
    }

    fn map_degrees(&self, mut f: impl FnMut(f32) -> f32) -> Vec<LayerMask> {
        self.layers
            .iter()
            .map(|l| LayerMask {
                planes: l.planes.iter().map(|p| p.mapv(&mut f)).collect(),
            })
            .collect()
    }
}

fn check_ratio_degree(sigma: f64, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!(
            "aging ratio must be in [0, 1], got {sigma}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "aging degree must be in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// Number of aged cells in a plane of `cells` entries: `round(sigma * cells)`.
pub fn aged_cell_count(sigma: f64, cells: usize) -> usize {
    ((sigma * cells as f64) + 0.5).floor() as usize
}

/// One degree plane with exactly `round(sigma * rows * cols)` aged cells at
/// uniformly sampled positions.
pub fn generate_plane(rows: usize, cols: usize, sigma: f64, alpha: f64, seed: u64) -> Array2<f32> {
    let cells = rows * cols;
    let k = aged_cell_count(sigma, cells).min(cells);
    let mut flat = vec![1.0f32; cells];
    let mut rng = seed::rng(seed);
    for pos in index::sample(&mut rng, cells, k) {
        flat[pos] = alpha as f32;
    }
    Array2::from_shape_vec((rows, cols), flat).expect("plane shape matches buffer")
}

/// Generate independent random degree planes for every layer and bit index.
/// The plane for `(layer, bit)` is seeded from `(seed, layer, bit)` alone.
pub fn generate_mask(
    shapes: &[(usize, usize)],
    q: u32,
    sigma: f64,
    alpha: f64,
    seed: u64,
) -> Result<AgingMask> {
    check_ratio_degree(sigma, alpha)?;
    if shapes.is_empty() {
        return Err(Error::Empty("layer shape list"));
    }
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(l, &(rows, cols))| LayerMask {
            planes: (0..q as usize)
                .map(|i| {
                    let s = seed::derive(seed, "mask-plane", (l * q as usize + i) as u64);
                    generate_plane(rows, cols, sigma, alpha, s)
                })
                .collect(),
        })
        .collect();
    Ok(AgingMask {
        seed,
        sigma,
        alpha,
        q,
        layers,
        transforms: Vec::new(),
    })
}

/// Top-left `rows x cols` slice of a prototype plane.
pub fn subset_mask(prototype: &Array2<f32>, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let (pr, pc) = prototype.dim();
    if rows > pr || cols > pc {
        return Err(Error::Dimension(format!(
            "target {rows}x{cols} does not fit in the {pr}x{pc} prototype"
        )));
    }
    Ok(prototype.slice(s![..rows, ..cols]).to_owned())
}

/// Array reuse: every layer shares one prototype plane per bit index, generated
/// at the shape of the layer with the most weights; smaller layers take
/// top-left subsets of it.
pub fn generate_shared_mask(
    shapes: &[(usize, usize)],
    q: u32,
    sigma: f64,
    alpha: f64,
    seed: u64,
) -> Result<AgingMask> {
    check_ratio_degree(sigma, alpha)?;
    let &(pr, pc) = shapes
        .iter()
        .max_by_key(|(r, c)| r * c)
        .ok_or(Error::Empty("layer shape list"))?;
    let prototypes: Vec<Array2<f32>> = (0..q as usize)
        .map(|i| generate_plane(pr, pc, sigma, alpha, seed::derive(seed, "mask-prototype", i as u64)))
        .collect();
    let layers = shapes
        .iter()
        .map(|&(r, c)| {
            Ok(LayerMask {
                planes: prototypes
                    .iter()
                    .map(|p| subset_mask(p, r, c))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AgingMask {
        seed,
        sigma,
        alpha,
        q,
        layers,
        transforms: vec![MaskTransform::SharedPrototype],
    })
}

/// Replace every aged degree `d` with a sample from `N(d, (rel_std * d)^2)`,
/// clamped to `[MIN_DEGREE, MAX_AGED_DEGREE]`. Unaged cells are untouched, so
/// the aged/unaged partition is preserved.
pub fn apply_process_variation(mask: &AgingMask, rel_std: f64, seed: u64) -> Result<AgingMask> {
    if !(rel_std >= 0.0 && rel_std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "process-variation std must be >= 0, got {rel_std}"
        )));
    }
    let mut out = mask.clone();
    if rel_std > 0.0 {
        for (l, layer) in out.layers.iter_mut().enumerate() {
            for (i, plane) in layer.planes.iter_mut().enumerate() {
                let idx = (l * mask.q as usize + i) as u64;
                let mut rng = seed::rng(seed::derive(seed, "process-variation", idx));
                for d in plane.iter_mut().filter(|d| **d != 1.0) {
                    let mean = f64::from(*d);
                    let normal = Normal::new(mean, rel_std * mean).expect("finite std");
                    let v = normal.sample(&mut rng) as f32;
                    *d = v.clamp(MIN_DEGREE, MAX_AGED_DEGREE);
                }
            }
        }
    }
    out.transforms
        .push(MaskTransform::ProcessVariation { rel_std, seed });
    Ok(out)
}

/// Uniform multiplicative shrink of every degree (aged and unaged) from
/// in-field HCI stress, floored at [`MIN_DEGREE`].
pub fn natural_drift(mask: &AgingMask, shrink: f64) -> Result<AgingMask> {
    if !(0.0..1.0).contains(&shrink) {
        return Err(Error::InvalidArgument(format!(
            "degree shrink must be in [0, 1), got {shrink}"
        )));
    }
    let factor = 1.0 - shrink;
    let mut out = mask.clone();
    out.layers = mask.map_degrees(|d| ((f64::from(d) * factor) as f32).max(MIN_DEGREE));
    out.transforms.push(MaskTransform::NaturalDrift { shrink });
    Ok(out)
}

/// Power-law HCI threshold-voltage drift, `delta_vth = zeta * t^chi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaturalAgingParams {
    /// Volts per year^chi.
    pub zeta: f64,
    pub chi: f64,
    /// Informational: stress supply voltage (V).
    pub vds: f64,
    /// Informational: operating temperature (K).
    pub temperature_k: f64,
    /// Baseline threshold voltage (V).
    pub vth0: f64,
}

impl NaturalAgingParams {
    pub fn new(zeta: f64, chi: f64) -> Result<Self> {
        if !(zeta > 0.0) || !(chi > 0.0 && chi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "power law needs zeta > 0 and 0 < chi < 1, got zeta={zeta}, chi={chi}"
            )));
        }
        Ok(Self {
            zeta,
            chi,
            vds: 1.2,
            temperature_k: 323.15,
            vth0: 0.46893,
        })
    }

    /// Solve `zeta, chi` from two `(years, volts)` observations.
    pub fn fit_two_point(p1: (f64, f64), p2: (f64, f64)) -> Result<Self> {
        let ((t1, v1), (t2, v2)) = (p1, p2);
        if !(t1 > 0.0 && t2 > 0.0 && v1 > 0.0 && v2 > 0.0) || t1 == t2 {
            return Err(Error::InvalidArgument(
                "calibration points need distinct positive times and positive drifts".into(),
            ));
        }
        let chi = (v2 / v1).ln() / (t2 / t1).ln();
        let zeta = v1 / t1.powf(chi);
        Self::new(zeta, chi)
    }

    /// Default calibration: 0.0083 V after 5 years, 0.0114 V after 10 years of
    /// stress at 1.2 V / 323.15 K on a 0.46893 V device.
    pub fn hci_default() -> Self {
        Self::fit_two_point((5.0, 0.0083), (10.0, 0.0114)).expect("valid calibration points")
    }

    /// Threshold drift in volts after `years` of stress.
    pub fn vth_drift(&self, years: f64) -> f64 {
        if years <= 0.0 {
            return 0.0;
        }
        self.zeta * years.powf(self.chi)
    }

    /// Drift relative to the baseline threshold voltage.
    pub fn relative_drift(&self, years: f64) -> f64 {
        self.vth_drift(years) / self.vth0
    }
}

const MASK_MAGIC: &str = "PIMAGE-MASK";
pub const MASK_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskHeader {
    version: u32,
    q: u32,
    sigma: f64,
    alpha: f64,
    seed: u64,
    layer_count: usize,
    layers: Vec<ShapeEntry>,
    planes: usize,
    #[serde(default)]
    transforms: Vec<MaskTransform>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeEntry {
    rows: usize,
    cols: usize,
}

/// Write a mask: a magic line, a one-line JSON header, then little-endian
/// `f32` degrees, row-major, layer-major then bit index.
pub fn save_mask(mask: &AgingMask, path: &Path) -> Result<()> {
    let header = MaskHeader {
        version: MASK_VERSION,
        q: mask.q,
        sigma: mask.sigma,
        alpha: mask.alpha,
        seed: mask.seed,
        layer_count: mask.layers.len(),
        layers: mask
            .shapes()
            .into_iter()
            .map(|(rows, cols)| ShapeEntry { rows, cols })
            .collect(),
        planes: mask.plane_count(),
        transforms: mask.transforms.clone(),
    };
    let mut buf = Vec::new();
    writeln!(buf, "{MASK_MAGIC}").expect("vec write");
    serde_json::to_writer(&mut buf, &header).expect("header serializes");
    buf.push(b'\n');
    for layer in &mask.layers {
        for plane in &layer.planes {
            for &d in plane.iter() {
                buf.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Split `magic\njson\npayload` framing shared by mask and checkpoint files.
pub(crate) fn split_framed<'a>(
    bytes: &'a [u8],
    magic: &str,
    path: &Path,
) -> Result<(&'a [u8], &'a [u8])> {
    let mut parts = bytes.splitn(3, |&b| b == b'\n');
    let first = parts.next().unwrap_or_default();
    if first != magic.as_bytes() {
        return Err(Error::corrupt(path, format!("missing {magic} magic line")));
    }
    let header = parts
        .next()
        .ok_or_else(|| Error::corrupt(path, "missing header line"))?;
    let payload = parts
        .next()
        .ok_or_else(|| Error::corrupt(path, "header is not newline-terminated"))?;
    Ok((header, payload))
}

pub(crate) fn read_f32_le(payload: &[u8]) -> impl Iterator<Item = f32> + '_ {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

pub fn load_mask(path: &Path) -> Result<AgingMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split_framed(&bytes, MASK_MAGIC, path)?;
    let header: MaskHeader = serde_json::from_slice(header)
        .map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;
    if header.version != MASK_VERSION {
        return Err(Error::Version {
            kind: "mask",
            found: header.version,
            expected: MASK_VERSION,
        });
    }
    if header.layer_count != header.layers.len()
        || header.planes != header.layer_count * header.q as usize
    {
        return Err(Error::Dimension(format!(
            "mask header declares {} layers / {} planes but lists {} shapes with q={}",
            header.layer_count,
            header.planes,
            header.layers.len(),
            header.q
        )));
    }
    let expected: usize = header
        .layers
        .iter()
        .map(|s| s.rows * s.cols * header.q as usize * 4)
        .sum();
    if payload.len() != expected {
        return Err(Error::corrupt(
            path,
            format!("payload is {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut values = read_f32_le(payload);
    let mut layers = Vec::with_capacity(header.layers.len());
    for s in &header.layers {
        let planes = (0..header.q)
            .map(|_| {
                let v: Vec<f32> = values.by_ref().take(s.rows * s.cols).collect();
                Array2::from_shape_vec((s.rows, s.cols), v).expect("length checked")
            })
            .collect();
        layers.push(LayerMask::new(planes).map_err(|e| Error::corrupt(path, e.to_string()))?);
    }
    Ok(AgingMask {
        seed: header.seed,
        sigma: header.sigma,
        alpha: header.alpha,
        q: header.q,
        layers,
        transforms: header.transforms,
    })
}
