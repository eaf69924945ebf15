//! Uniform integer quantization primitives.
//!
//! Two schemes cover everything downstream:
//!
//!   symmetric signed    codes in [-(2^(b-1)-1), 2^(b-1)-1], zero fixed at 0
//!   asymmetric unsigned codes in [0, 2^b - 1] with an integer zero-point
//!
//! Scale fitting follows the min/max rule
//!
//!   s = (x_max - x_min) / (q_max - q_min),   z = round(q_min - x_min / s)
//!
//! with the symmetric case collapsing to s = max|x| / q_max. Code formation
//! rounds half away from zero. Degenerate inputs (constant, incl. all-zero)
//! get s = 1 so that small integer constants survive the roundtrip exactly.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    SymmetricSigned,
    AsymmetricUnsigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One parameter set per row: output channels for weights, tokens for
    /// activations.
    PerChannel,
    /// Contiguous column groups of the given width within each row.
    PerGroup(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    pub scale: f64,
    pub zero: i32,
}

/// Code range for a bit-width under a scheme.
pub fn qrange(bits: u32, scheme: Scheme) -> (i32, i32) {
    match scheme {
        Scheme::SymmetricSigned => {
            let m = (1i32 << (bits - 1)) - 1;
            (-m, m)
        }
        Scheme::AsymmetricUnsigned => (0, (1i32 << bits) - 1),
    }
}

/// Symmetric scale max|x| / q_max, with the degenerate all-zero case pinned
/// to 1. `q_max` is a parameter because the progressive quantizer narrows it
/// below the nominal 2^(b-1)-1.
pub fn symmetric_scale(xs: &[f64], q_max: i32) -> Result<f64> {
    let mut amax = 0.0f64;
    for &x in xs {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite value {x}")));
        }
        amax = amax.max(x.abs());
    }
    if amax == 0.0 {
        return Ok(1.0);
    }
    Ok(amax / q_max as f64)
}

/// Asymmetric scale and zero-point over the min/max of `xs`.
pub fn asymmetric_params(xs: &[f64], q_min: i32, q_max: i32) -> Result<QParams> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in xs {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite value {x}")));
        }
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if xs.is_empty() {
        return Err(Error::InvalidInput("empty slice".into()));
    }
    let scale = if hi > lo { (hi - lo) / (q_max - q_min) as f64 } else { 1.0 };
    let zero = (q_min as f64 - lo / scale).round();
    Ok(QParams {
        scale,
        zero: (zero.max(q_min as f64).min(q_max as f64)) as i32,
    })
}

pub fn fit_params(xs: &[f64], bits: u32, scheme: Scheme) -> Result<QParams> {
    let (q_min, q_max) = qrange(bits, scheme);
    match scheme {
        Scheme::SymmetricSigned => Ok(QParams {
            scale: symmetric_scale(xs, q_max)?,
            zero: 0,
        }),
        Scheme::AsymmetricUnsigned => asymmetric_params(xs, q_min, q_max),
    }
}

/// round(x/s + z), clamped to the code range. The zero-point is added before
/// rounding, and halves round away from zero.
#[inline]
pub fn quantize_value(x: f64, p: &QParams, q_min: i32, q_max: i32) -> i32 {
    let q = (x / p.scale + p.zero as f64).round();
    q.max(q_min as f64).min(q_max as f64) as i32
}

#[inline]
pub fn dequantize_value(q: i32, p: &QParams) -> f64 {
    (q - p.zero) as f64 * p.scale
}

// ---------------------------------------------------------------------------
// whole-tensor driver

#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub scheme: Scheme,
    pub granularity: Granularity,
    /// Codes in row-major order, always within `qrange(bits, scheme)`.
    pub codes: Vec<i32>,
    /// One entry per tensor / row / group, indexed `row * groups_per_row + g`.
    pub params: Vec<QParams>,
}

impl QuantizedTensor {
    pub fn groups_per_row(&self) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => 1,
            Granularity::PerGroup(g) => self.cols / g,
        }
    }

    pub fn param_for(&self, r: usize, c: usize) -> &QParams {
        match self.granularity {
            Granularity::PerTensor => &self.params[0],
            Granularity::PerChannel => &self.params[r],
            Granularity::PerGroup(g) => &self.params[r * (self.cols / g) + c / g],
        }
    }

    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = dequantize_value(self.codes[r * self.cols + c], self.param_for(r, c));
                out.set(r, c, v);
            }
        }
        out
    }
}

/// Round-to-nearest quantization of a matrix at the given precision and
/// granularity. Group width must divide the column count.
pub fn quantize_matrix(
    m: &Matrix,
    bits: u32,
    scheme: Scheme,
    granularity: Granularity,
) -> Result<QuantizedTensor> {
    quantize_matrix_clipped(m, bits, scheme, granularity, 1.0)
}

/// Convenience: quantize, immediately dequantize. This is the "fake quant"
/// used for error measurement.
pub fn fake_quantize(
    m: &Matrix,
    bits: u32,
    scheme: Scheme,
    granularity: Granularity,
) -> Result<Matrix> {
    Ok(quantize_matrix(m, bits, scheme, granularity)?.dequantize())
}

/// Like `quantize_matrix`, but every sharing unit's dynamic range is shrunk
/// to clip * [min, max] before fitting; values outside saturate. clip = 1
/// reproduces plain round-to-nearest. This is the knob the weight-clipping
/// grid search turns.
pub fn quantize_matrix_clipped(
    m: &Matrix,
    bits: u32,
    scheme: Scheme,
    granularity: Granularity,
    clip: f64,
) -> Result<QuantizedTensor> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Unsupported(format!("bit-width {bits}")));
    }
    if !(clip > 0.0 && clip <= 1.0) {
        return Err(Error::InvalidInput(format!("clip ratio {clip}")));
    }
    let clipped = |xs: &[f64]| -> Vec<f64> { xs.iter().map(|&x| x * clip).collect() };
    let (q_min, q_max) = qrange(bits, scheme);
    let mut params = Vec::new();
    match granularity {
        Granularity::PerTensor => params.push(fit_params(&clipped(m.data()), bits, scheme)?),
        Granularity::PerChannel => {
            for r in 0..m.rows {
                params.push(fit_params(&clipped(m.row(r)), bits, scheme)?);
            }
        }
        Granularity::PerGroup(g) => {
            if g == 0 || m.cols % g != 0 {
                return Err(Error::Shape(format!(
                    "group size {g} does not divide {} columns",
                    m.cols
                )));
            }
            for r in 0..m.rows {
                for chunk in m.row(r).chunks(g) {
                    params.push(fit_params(&clipped(chunk), bits, scheme)?);
                }
            }
        }
    }
    let mut qt = QuantizedTensor {
        rows: m.rows,
        cols: m.cols,
        bits,
        scheme,
        granularity,
        codes: vec![0; m.rows * m.cols],
        params,
    };
    for r in 0..m.rows {
        for c in 0..m.cols {
            qt.codes[r * m.cols + c] =
                quantize_value(m.get(r, c), qt.param_for(r, c), q_min, q_max);
        }
    }
    Ok(qt)
}
