//! Two-level progressive weight quantization (4-bit codes, 8-bit intermediates).
//!
//! Level 0 quantizes each output channel symmetrically to int8, but into the
//! narrowed range [-119, 119] instead of [-127, 127]. Level 1 then quantizes
//! each column group of those int8 intermediates asymmetrically to 4 bits,
//! with an *integer* (u8) scale and a u4 zero-point:
//!
//!   s1 = max(1, round((max - min) / 15))      z = round(-min / s1)
//!   code = round(q/s1 + z)                    recon = (code - z) * s1
//!
//! The narrowed level-0 range is what makes the scheme safe: with |q| <= 119
//! the group scale is at most round(238/15) = 16, the nearest-multiple
//! reconstruction error is at most s1/2 = 8, and every recon stays inside
//! [-127, 127]. Run the same arithmetic on full-range intermediates and it
//! breaks: the group [-113, 120] gets s1 = 16, z = 7, codes 120 as
//! round(120/16) + 7 = 15, and reconstructs (15 - 7) * 16 = 128 -- an int8
//! overflow. `sweep_int8_guarantee` checks every reachable case by brute
//! force, which is cheap because the whole space is ~2.3M integer triples.

use crate::error::{Error, Result};
use crate::f16::{f16_bits_from_f64, f64_from_f16_bits};
use crate::matrix::Matrix;
use crate::quant::symmetric_scale;

/// Level-1 code range (4 bits, unsigned).
const L1_MAX: i32 = 15;

/// Largest symmetric level-0 bound such that level-1 reconstructions cannot
/// leave the signed `int_bits` range. For 8-bit intermediates and 4-bit codes
/// this is 119.
pub fn protective_qmax(int_bits: u32, code_bits: u32) -> i32 {
    let target = (1i32 << (int_bits - 1)) - 1;
    let levels = (1i32 << code_bits) - 1;
    (1..=target)
        .rev()
        .find(|b| {
            // worst-case group scale over [-b, b], then b + s/2 <= target
            let s = ((2 * b) as f64 / levels as f64).round() as i32;
            2 * b + s <= 2 * target
        })
        .unwrap_or(1)
}

/// The narrowed symmetric range for the only supported precision pair:
/// 8-bit intermediates with 4-bit group codes give (-119, 119). The bound is
/// derived by search, and `sweep_int8_guarantee` proves it exhaustively.
pub fn protective_range(bits_intermediate: u32, bits_code: u32) -> Result<(i32, i32)> {
    if (bits_intermediate, bits_code) != (8, 4) {
        return Err(Error::Unsupported(format!(
            "protective range only derived for 8-bit/4-bit, got {bits_intermediate}/{bits_code}"
        )));
    }
    let b = protective_qmax(bits_intermediate, bits_code);
    Ok((-b, b))
}

/// Integer scale and zero-point for one group of int8 intermediates.
/// Constant groups fall back to s1 = 1; the zero-point is clamped into u4.
pub fn group_params(min: i32, max: i32) -> (u8, u8) {
    debug_assert!(min <= max);
    let s1 = ((max - min) as f64 / L1_MAX as f64).round() as i32;
    let s1 = s1.max(1);
    let z = (-(min as f64) / s1 as f64).round() as i32;
    (s1 as u8, z.clamp(0, L1_MAX) as u8)
}

#[inline]
pub fn level1_code(q: i32, s1: u8, z: u8) -> u8 {
    // zero-point inside the round: code = round(q/s + z)
    let c = (q as f64 / s1 as f64 + z as f64).round() as i32;
    c.clamp(0, L1_MAX) as u8
}

#[inline]
pub fn level1_recon(code: u8, s1: u8, z: u8) -> i32 {
    (code as i32 - z as i32) * s1 as i32
}

// ---------------------------------------------------------------------------
// exhaustive guarantee check

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub lo: i32,
    pub hi: i32,
    pub q: i32,
    pub s1: u8,
    pub z: u8,
    pub code: u8,
    pub recon: i32,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    /// (lo, hi, q) triples examined.
    pub cases: u64,
    pub violations: u64,
    pub witness: Option<Violation>,
}

/// Brute-force every group envelope -bound <= lo <= hi <= bound and every
/// integer intermediate q in [lo, hi]; count reconstructions that escape
/// [-128, 127]. At the protective bound this must report zero.
pub fn sweep_int8_guarantee(bound: i32) -> SweepReport {
    let mut report = SweepReport { cases: 0, violations: 0, witness: None };
    for lo in -bound..=bound {
        for hi in lo..=bound {
            let (s1, z) = group_params(lo, hi);
            for q in lo..=hi {
                report.cases += 1;
                let code = level1_code(q, s1, z);
                let recon = level1_recon(code, s1, z);
                if !(-128..=127).contains(&recon) {
                    report.violations += 1;
                    report.witness.get_or_insert(Violation {
                        lo,
                        hi,
                        q,
                        s1,
                        z,
                        code,
                        recon,
                    });
                }
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// tensor-level quantizer

/// A weight matrix after two-level quantization. Codes are kept one-per-byte;
/// packing into the kernel layout is the execution module's concern.
#[derive(Debug, Clone)]
pub struct ProgressiveWeight {
    pub rows: usize,
    pub cols: usize,
    pub group: usize,
    /// Per-row level-0 scale, stored as binary16 bits like the target format.
    pub s0_bits: Vec<u16>,
    /// Per-group integer scale, row-major groups.
    pub s1: Vec<u8>,
    /// Per-group zero-point (u4 range).
    pub zeros: Vec<u8>,
    /// 4-bit codes, one per element.
    pub codes: Vec<u8>,
    /// Level-0 bound the codes were clamped to (119 normally).
    pub q_bound: i32,
}

impl ProgressiveWeight {
    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group
    }

    /// Reconstruct the int8 intermediates, failing loudly if any recon
    /// escapes the signed 8-bit range (cannot happen at the protective bound).
    pub fn level1_int8(&self) -> Result<Vec<i8>> {
        let gpr = self.groups_per_row();
        let mut out = vec![0i8; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let g = r * gpr + c / self.group;
                let recon = level1_recon(self.codes[r * self.cols + c], self.s1[g], self.zeros[g]);
                if !(-128..=127).contains(&recon) {
                    return Err(Error::OverflowViolation { value: recon as i64, row: r, col: c });
                }
                out[r * self.cols + c] = recon as i8;
            }
        }
        Ok(out)
    }

    /// Full dequantization back to floats: level-1 recon times the f16 scale.
    pub fn dequantize(&self) -> Result<Matrix> {
        let ints = self.level1_int8()?;
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let s0 = f64_from_f16_bits(self.s0_bits[r]);
            for c in 0..self.cols {
                out.set(r, c, ints[r * self.cols + c] as f64 * s0);
            }
        }
        Ok(out)
    }
}

/// Quantize with the protective level-0 bound (119).
pub fn quantize_progressive(w: &Matrix, group: usize) -> Result<ProgressiveWeight> {
    quantize_progressive_with_bound(w, group, protective_qmax(8, 4))
}

/// Protective bound with a shrunken dynamic range: the level-0 scale is fit
/// to clip * max|row|, saturating whatever sticks out. Used by the clip
/// search; clip = 1 is the plain quantizer.
pub fn quantize_progressive_clipped(
    w: &Matrix,
    group: usize,
    clip: f64,
) -> Result<ProgressiveWeight> {
    quantize_progressive_impl(w, group, protective_qmax(8, 4), clip)
}

/// Same pipeline with a caller-chosen level-0 bound. Passing 127 reproduces
/// the naive full-range variant whose reconstructions can overflow int8.
pub fn quantize_progressive_with_bound(
    w: &Matrix,
    group: usize,
    q_bound: i32,
) -> Result<ProgressiveWeight> {
    quantize_progressive_impl(w, group, q_bound, 1.0)
}

fn quantize_progressive_impl(
    w: &Matrix,
    group: usize,
    q_bound: i32,
    clip: f64,
) -> Result<ProgressiveWeight> {
    if group == 0 || w.cols % group != 0 {
        return Err(Error::Shape(format!(
            "group size {group} does not divide {} columns",
            w.cols
        )));
    }
    if !(1..=127).contains(&q_bound) {
        return Err(Error::InvalidInput(format!("level-0 bound {q_bound}")));
    }
    if !(clip > 0.0 && clip <= 1.0) {
        return Err(Error::InvalidInput(format!("clip ratio {clip} outside (0, 1]")));
    }
    let gpr = w.cols / group;
    let mut pw = ProgressiveWeight {
        rows: w.rows,
        cols: w.cols,
        group,
        s0_bits: Vec::with_capacity(w.rows),
        s1: Vec::with_capacity(w.rows * gpr),
        zeros: Vec::with_capacity(w.rows * gpr),
        codes: vec![0; w.rows * w.cols],
        q_bound,
    };

    let mut inter = vec![0i32; w.cols];
    for r in 0..w.rows {
        // level 0: symmetric int8 into the narrowed range, scale kept as f16.
        // Codes are clamped after rounding, so a scale that rounds down in
        // f16 cannot push an intermediate past the bound.
        let mut s0_bits = f16_bits_from_f64(clip * symmetric_scale(w.row(r), q_bound)?);
        if s0_bits & 0x7FFF == 0 {
            s0_bits = 0x0001; // tiny rows: don't let the scale underflow to 0
        }
        let s0 = f64_from_f16_bits(s0_bits);
        pw.s0_bits.push(s0_bits);
        for c in 0..w.cols {
            inter[c] = ((w.get(r, c) / s0).round() as i32).clamp(-q_bound, q_bound);
        }

        // level 1: per-group asymmetric 4-bit over the intermediates
        for g in 0..gpr {
            let chunk = &inter[g * group..(g + 1) * group];
            let lo = *chunk.iter().min().unwrap();
            let hi = *chunk.iter().max().unwrap();
            let (s1, z) = group_params(lo, hi);
            pw.s1.push(s1);
            pw.zeros.push(z);
            for (i, &q) in chunk.iter().enumerate() {
                pw.codes[r * w.cols + g * group + i] = level1_code(q, s1, z);
            }
        }
    }
    Ok(pw)
}

// ---------------------------------------------------------------------------
// legacy two-level scheme, kept for contrast
//
// The older way to get integer group scales: quantize groups directly to
// signed 4-bit with float scales, then quantize those per-group float scales
// to u8 per channel. Its full float dequantization is about as accurate as
// the progressive scheme, but its group-scale-only reconstruction
// code * s_u8 has no reason to fit int8 -- which is exactly why the
// progressive ordering exists.

#[derive(Debug, Clone)]
pub struct LegacyTwoLevelWeight {
    pub rows: usize,
    pub cols: usize,
    pub group: usize,
    /// Signed 4-bit codes in [-7, 7].
    pub codes_s4: Vec<i8>,
    /// Per-group scale codes in [0, 255].
    pub scales_group_u8: Vec<u8>,
    /// Per-channel float scale for the group-scale codes.
    pub scales_channel: Vec<f64>,
}

impl LegacyTwoLevelWeight {
    pub fn dequantize(&self) -> Matrix {
        let gpr = self.cols / self.group;
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let g = r * gpr + c / self.group;
                let s = self.scales_group_u8[g] as f64 * self.scales_channel[r];
                out.set(r, c, self.codes_s4[r * self.cols + c] as f64 * s);
            }
        }
        out
    }

    /// Reconstruction using only the integer group scales, as an int8 GEMM
    /// would need it. Returns the values without range checking so tests can
    /// show they escape int8.
    pub fn group_scale_recon(&self) -> Vec<i32> {
        let gpr = self.cols / self.group;
        let mut out = vec![0i32; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let g = r * gpr + c / self.group;
                out[r * self.cols + c] =
                    self.codes_s4[r * self.cols + c] as i32 * self.scales_group_u8[g] as i32;
            }
        }
        out
    }
}

pub fn quantize_legacy_two_level(w: &Matrix, group: usize) -> Result<LegacyTwoLevelWeight> {
    if group == 0 || w.cols % group != 0 {
        return Err(Error::Shape(format!(
            "group size {group} does not divide {} columns",
            w.cols
        )));
    }
    let gpr = w.cols / group;
    let mut lw = LegacyTwoLevelWeight {
        rows: w.rows,
        cols: w.cols,
        group,
        codes_s4: vec![0; w.rows * w.cols],
        scales_group_u8: Vec::with_capacity(w.rows * gpr),
        scales_channel: Vec::with_capacity(w.rows),
    };
    for r in 0..w.rows {
        // group s4 quantization with float scales
        let mut fscales = Vec::with_capacity(gpr);
        for g in 0..gpr {
            let chunk = &w.row(r)[g * group..(g + 1) * group];
            let s = symmetric_scale(chunk, 7)?;
            for (i, &x) in chunk.iter().enumerate() {
                lw.codes_s4[r * w.cols + g * group + i] =
                    (x / s).round().clamp(-7.0, 7.0) as i8;
            }
            fscales.push(s);
        }
        // then u8-quantize the float scales per channel
        let s_chan = symmetric_scale(&fscales, 255)?;
        lw.scales_channel.push(s_chan);
        for &fs in &fscales {
            lw.scales_group_u8.push((fs / s_chan).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(lw)
}
