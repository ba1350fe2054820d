// SPDX-License-Identifier: Apache-2.0

//! Bit-sliced fixed-point algebra.
//!
//! A `q`-bit weight code is `sum_i 2^(i-1) * b_i` with every bit `b_i` in
//! `{+1, -1}`, so the representable codes are exactly the odd integers in
//! `[-(2^q - 1), 2^q - 1]`. Inputs are unsigned: an `n`-bit input value is
//! `sum_j 2^(j-1) * x_j` with `x_j` in `{0, 1}`.
//!
//! Plane index 0 is bit index 1 (the least significant plane) throughout.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

/// Largest representable magnitude for `q` bits, `2^q - 1`.
pub fn code_limit(q: u32) -> i64 {
    (1i64 << q) - 1
}

/// Round half toward +inf.
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Split an odd code into `q` ±1 bits (bit index 1 first).
pub fn decompose(code: i64, q: u32) -> Result<Vec<i8>> {
    check_q(q)?;
    let limit = code_limit(q);
    if code.rem_euclid(2) != 1 || code.abs() > limit {
        return Err(Error::InvalidCode { code, q });
    }
    // Shift to an unsigned value whose binary digits select +1 (1) or -1 (0).
    let shifted = (code + limit) / 2;
    Ok((0..q)
        .map(|i| if (shifted >> i) & 1 == 1 { 1 } else { -1 })
        .collect())
}

/// Inverse of [`decompose`]: `sum_i 2^(i-1) * b_i`. The bit count is the
/// slice length.
pub fn reconstruct(bits: &[i8]) -> i64 {
    bits.iter()
        .enumerate()
        .map(|(i, &b)| i64::from(b) << i)
        .sum()
}

/// Nearest odd code to `x`, ties toward +inf, clamped to the `q`-bit range.
pub fn nearest_odd(x: f64, q: u32) -> i64 {
    let limit = code_limit(q);
    // Odd integers are 2k+1; round (x-1)/2 to the nearest k.
    let k = round_half_up((x - 1.0) / 2.0);
    let code = 2.0 * k + 1.0;
    (code as i64).clamp(-limit, limit)
}

fn check_q(q: u32) -> Result<()> {
    if q == 0 || q > 16 {
        return Err(Error::InvalidArgument(format!(
            "bit width must be in 1..=16, got {q}"
        )));
    }
    Ok(())
}

/// One layer's weights as `q` stacked ±1 planes of shape `rows x cols`
/// (rows = fan-in, one SRAM row per input).
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlanes {
    q: u32,
    planes: Vec<Array2<f32>>,
    /// Real value of one code step.
    pub scale: f32,
}

impl BitPlanes {
    /// Build from ±1 planes. Fails on any entry that is not exactly ±1.
    pub fn from_planes(planes: Vec<Array2<f32>>, scale: f32) -> Result<Self> {
        let q = u32::try_from(planes.len()).unwrap_or(u32::MAX);
        check_q(q)?;
        let dim = planes[0].dim();
        for p in &planes {
            if p.dim() != dim {
                return Err(Error::Dimension(format!(
                    "bit plane shape {:?} differs from {:?}",
                    p.dim(),
                    dim
                )));
            }
            if p.iter().any(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::InvalidArgument(
                    "bit plane entries must be exactly +1 or -1".into(),
                ));
            }
        }
        Ok(Self { q, planes, scale })
    }

    /// Decompose an integer code matrix entrywise.
    pub fn from_codes(codes: ArrayView2<'_, i64>, q: u32, scale: f32) -> Result<Self> {
        check_q(q)?;
        let mut planes = vec![Array2::<f32>::zeros(codes.dim()); q as usize];
        for ((r, c), &code) in codes.indexed_iter() {
            for (i, b) in decompose(code, q)?.into_iter().enumerate() {
                planes[i][(r, c)] = f32::from(b);
            }
        }
        Ok(Self { q, planes, scale })
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn rows(&self) -> usize {
        self.planes[0].nrows()
    }

    pub fn cols(&self) -> usize {
        self.planes[0].ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.planes[0].dim()
    }

    /// Plane for bit index `i + 1`.
    pub fn plane(&self, i: usize) -> &Array2<f32> {
        &self.planes[i]
    }

    /// Callers must keep every entry at exactly +1 or -1.
    pub(crate) fn planes_mut(&mut self) -> &mut [Array2<f32>] {
        &mut self.planes
    }

    pub fn planes(&self) -> &[Array2<f32>] {
        &self.planes
    }

    /// Integer codes `sum_i 2^(i-1) b_i`.
    pub fn codes(&self) -> Array2<i64> {
        let mut out = Array2::<i64>::zeros(self.dim());
        for (i, p) in self.planes.iter().enumerate() {
            Zip::from(&mut out).and(p).for_each(|o, &b| *o += (b as i64) << i);
        }
        out
    }

    /// Real-valued weights, `scale * code`.
    pub fn dequantize(&self) -> Array2<f32> {
        self.codes().mapv(|c| c as f32 * self.scale)
    }
}

/// Quantize a real matrix to odd `q`-bit codes with `scale = max|w| / (2^q - 1)`.
/// An all-zero matrix uses scale 1.
pub fn quantize_weights(w: ArrayView2<'_, f32>, q: u32) -> Result<BitPlanes> {
    check_q(q)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "weight matrix contains non-finite entries".into(),
        ));
    }
    let max_abs = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs > 0.0 {
        max_abs / code_limit(q) as f32
    } else {
        1.0
    };
    quantize_weights_with_scale(w, q, scale)
}

/// Quantize with a caller-chosen code step.
pub fn quantize_weights_with_scale(
    w: ArrayView2<'_, f32>,
    q: u32,
    scale: f32,
) -> Result<BitPlanes> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "quantization scale must be positive, got {scale}"
        )));
    }
    let codes = w.mapv(|v| nearest_odd(f64::from(v) / f64::from(scale), q));
    BitPlanes::from_codes(codes.view(), q, scale)
}

/// Unsigned `n`-bit input values for a batch (`batch x features`), streamed
/// bit-serially as `{0, 1}` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPlanes {
    n: u32,
    values: Array2<u32>,
    /// Number of inputs that fell outside `[0, 1]` and were clamped.
    pub saturated: usize,
}

impl InputPlanes {
    pub fn from_values(values: Array2<u32>, n: u32) -> Result<Self> {
        check_q(n)?;
        let limit = code_limit(n) as u32;
        if values.iter().any(|&v| v > limit) {
            return Err(Error::InvalidArgument(format!(
                "input value exceeds {n}-bit range"
            )));
        }
        Ok(Self {
            n,
            values,
            saturated: 0,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn values(&self) -> &Array2<u32> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `{0, 1}` plane for bit index `j + 1`.
    pub fn plane(&self, j: usize) -> Array2<u8> {
        self.values.mapv(|v| ((v >> j) & 1) as u8)
    }

    /// Values as floats, the functional model's activation input.
    pub fn to_f32(&self) -> Array2<f32> {
        self.values.mapv(|v| v as f32)
    }
}

/// Quantize activations in `[0, 1]` to `round(a * (2^n - 1))`, ties toward
/// +inf. Out-of-range entries (including NaN) are clamped and counted.
pub fn quantize_inputs(a: ArrayView2<'_, f32>, n: u32) -> Result<InputPlanes> {
    check_q(n)?;
    let limit = code_limit(n) as f64;
    let mut saturated = 0usize;
    let values = a.mapv(|v| {
        let v = f64::from(v);
        let clamped = if v.is_nan() {
            0.0
        } else {
            v.clamp(0.0, 1.0)
        };
        if clamped != v {
            saturated += 1;
        }
        round_half_up(clamped * limit) as u32
    });
    Ok(InputPlanes {
        n,
        values,
        saturated,
    })
}
