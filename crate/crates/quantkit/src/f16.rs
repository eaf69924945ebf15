//! Software binary16 (half precision) encode/decode.
//!
//! Level-0 scales and the KV-cache dequantization path are defined in terms of
//! f16 storage, so we need bit-exact conversions without pulling in a float
//! library. Encoding uses round-to-nearest-even; values past the largest
//! finite half (65504) saturate instead of producing infinities, because a
//! scale of `inf` is never useful.
//!
//! Layout reminder: 1 sign bit, 5 exponent bits (bias 15), 10 mantissa bits.

/// Largest finite binary16 value.
pub const F16_MAX: f64 = 65504.0;

/// Encode an f64 into binary16 bits, rounding to nearest-even and saturating
/// overflow (including infinities) at ±65504. NaN encodes as a quiet NaN.
pub fn f16_bits_from_f64(x: f64) -> u16 {
    let sign = ((x.to_bits() >> 63) as u16) << 15;
    if x.is_nan() {
        return sign | 0x7E00;
    }
    let ax = x.abs();
    if ax == 0.0 {
        return sign;
    }
    if ax >= 65536.0 {
        return sign | 0x7BFF; // saturate at 65504
    }

    // Unbiased binary exponent of ax, from raw f64 bits. ax is normal here:
    // anything small enough to be f64-subnormal rounds to half zero anyway.
    let e = ((ax.to_bits() >> 52) & 0x7FF) as i32 - 1023;

    if e < -14 {
        // Half subnormal range: round ax / 2^-24 to an integer significand.
        // Multiplying by an exact power of two keeps the value exact, so the
        // only rounding is the ties-to-even integer step.
        let m = (ax * f64::exp2(24.0)).round_ties_even() as u32;
        if m >= 1024 {
            return sign | (1 << 10); // rounded up into the normal range
        }
        return sign | m as u16;
    }

    // Normal range: significand in [1024, 2048).
    let mut e = e;
    let mut m = (ax * f64::exp2((10 - e) as f64)).round_ties_even() as u32;
    if m == 2048 {
        m = 1024;
        e += 1;
    }
    if e > 15 {
        return sign | 0x7BFF;
    }
    sign | (((e + 15) as u16) << 10) | ((m - 1024) as u16)
}

/// Decode binary16 bits to f64 (exact: every half value is an f64).
pub fn f64_from_f16_bits(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1F) as i32;
    let man = (h & 0x3FF) as f64;
    match exp {
        0 => sign * man * f64::exp2(-24.0),
        0x1F => {
            if man == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        _ => sign * (1024.0 + man) * f64::exp2((exp - 25) as f64),
    }
}

/// Round an f64 through binary16 storage and back.
pub fn round_to_f16(x: f64) -> f64 {
    f64_from_f16_bits(f16_bits_from_f64(x))
}

/// Distance between two half values in units in the last place.
///
/// Bit patterns are mapped onto a signed integer line (sign-magnitude to
/// two's-complement style), where adjacent representable values differ by 1.
/// ±0 coincide.
pub fn f16_ulp_distance(a: u16, b: u16) -> u32 {
    fn lin(h: u16) -> i32 {
        let mag = (h & 0x7FFF) as i32;
        if h & 0x8000 != 0 {
            -mag
        } else {
            mag
        }
    }
    (lin(a) - lin(b)).unsigned_abs()
}
