//! Paged low-bit KV cache with register-friendly fp16 dequantization.
//!
//! Keys and values are quantized per token per head to 4 or 8 bits with
//! fp16 scale and zero-point stored next to the codes, and tokens live in
//! fixed-size pages so memory grows in chunks. Decode-time attention reads
//! the cache through the same dequantization path the device kernel uses:
//! a 4-bit code is turned into an fp16 value by one bitwise OR (splicing the
//! nibble into the mantissa of 1024.0) and one fused multiply-add against a
//! precomputed constant -- two ALU ops where the naive path needs five.

use crate::calib::SmoothScales;
use crate::error::{Error, Result};
use crate::f16::{f16_bits_from_f64, f64_from_f16_bits, round_to_f16};
use crate::matrix::Matrix;

pub const DEFAULT_PAGE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvBits {
    Four,
    Eight,
}

impl KvBits {
    pub fn bits(self) -> u32 {
        match self {
            KvBits::Four => 4,
            KvBits::Eight => 8,
        }
    }

    fn qmax(self) -> i32 {
        match self {
            KvBits::Four => 15,
            KvBits::Eight => 255,
        }
    }
}

/// Quantization parameters for one head of one token: fp16 scale and an
/// integer zero-point carried as fp16 bits (integers up to 255 are exact in
/// fp16, so nothing is lost).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenParams {
    pub scale_bits: u16,
    pub zero_bits: u16,
}

#[derive(Debug, Clone)]
struct TokenSlot {
    k_codes: Vec<u8>,
    v_codes: Vec<u8>,
    k_params: TokenParams,
    v_params: TokenParams,
}

#[derive(Debug, Clone)]
struct Page {
    /// slots[head][token_in_page]
    slots: Vec<Vec<TokenSlot>>,
}

/// Paged per-token per-head low-bit cache for one attention layer.
#[derive(Debug, Clone)]
pub struct KvPageStore {
    pub kv_heads: usize,
    pub head_dim: usize,
    pub page_size: usize,
    pub bits: KvBits,
    pages: Vec<Page>,
    tokens: usize,
}

fn quantize_head_row(row: &[f64], bits: KvBits) -> (Vec<u8>, TokenParams) {
    let qmax = bits.qmax();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in row {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = if hi > lo { (hi - lo) / qmax as f64 } else { 1.0 };
    // the kernel sees the fp16-rounded scale, so fit codes against that
    let mut scale_bits = f16_bits_from_f64(scale);
    if scale_bits & 0x7FFF == 0 {
        scale_bits = 0x0001; // keep degenerate tiny ranges invertible
    }
    let s = f64_from_f16_bits(scale_bits);
    let zero = (-lo / s).round().clamp(0.0, qmax as f64);
    let codes = row
        .iter()
        .map(|&v| (v / s + zero).round().clamp(0.0, qmax as f64) as u8)
        .collect();
    (
        codes,
        TokenParams {
            scale_bits,
            zero_bits: f16_bits_from_f64(zero),
        },
    )
}

impl KvPageStore {
    pub fn new(kv_heads: usize, head_dim: usize, page_size: usize, bits: KvBits) -> Result<Self> {
        if kv_heads == 0 || head_dim == 0 || page_size == 0 {
            return Err(Error::InvalidConfig("empty cache geometry".into()));
        }
        if bits == KvBits::Four && head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "4-bit cache needs an even head dim to pack nibbles".into(),
            ));
        }
        Ok(KvPageStore {
            kv_heads,
            head_dim,
            page_size,
            bits,
            pages: Vec::new(),
            tokens: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    pub fn num_pages(&self) -> usize {
        self.pages.len()
    }

    /// Quantize and append one token's keys and values (each kv_heads x
    /// head_dim), opening a new page when the current one is full.
    pub fn append_token(&mut self, k: &Matrix, v: &Matrix) -> Result<()> {
        for (name, m) in [("keys", k), ("values", v)] {
            if m.rows != self.kv_heads || m.cols != self.head_dim {
                return Err(Error::Shape(format!(
                    "{name} {}x{} vs cache geometry {}x{}",
                    m.rows, m.cols, self.kv_heads, self.head_dim
                )));
            }
        }
        if self.tokens % self.page_size == 0 {
            self.pages.push(Page {
                slots: vec![Vec::with_capacity(self.page_size); self.kv_heads],
            });
        }
        let page = self.pages.last_mut().unwrap();
        for h in 0..self.kv_heads {
            let (k_codes, k_params) = quantize_head_row(k.row(h), self.bits);
            let (v_codes, v_params) = quantize_head_row(v.row(h), self.bits);
            page.slots[h].push(TokenSlot { k_codes, v_codes, k_params, v_params });
        }
        self.tokens += 1;
        Ok(())
    }

    fn slot(&self, head: usize, token: usize) -> &TokenSlot {
        let page = &self.pages[token / self.page_size];
        &page.slots[head][token % self.page_size]
    }

    /// Dequantized key vector for one (head, token), through the fast path.
    pub fn key(&self, head: usize, token: usize) -> Result<Vec<f64>> {
        self.fetch(head, token, true)
    }

    pub fn value(&self, head: usize, token: usize) -> Result<Vec<f64>> {
        self.fetch(head, token, false)
    }

    /// Quantization parameters of one slot, (key, value) order.
    pub fn slot_params(&self, head: usize, token: usize) -> Result<(TokenParams, TokenParams)> {
        if head >= self.kv_heads || token >= self.tokens {
            return Err(Error::Shape(format!(
                "slot ({head},{token}) outside cache {}x{}",
                self.kv_heads, self.tokens
            )));
        }
        let slot = self.slot(head, token);
        Ok((slot.k_params, slot.v_params))
    }

    fn fetch(&self, head: usize, token: usize, want_key: bool) -> Result<Vec<f64>> {
        if head >= self.kv_heads || token >= self.tokens {
            return Err(Error::Shape(format!(
                "slot ({head},{token}) outside cache {}x{}",
                self.kv_heads, self.tokens
            )));
        }
        let slot = self.slot(head, token);
        let (codes, params) = if want_key {
            (&slot.k_codes, slot.k_params)
        } else {
            (&slot.v_codes, slot.v_params)
        };
        Ok(match self.bits {
            KvBits::Four => codes
                .iter()
                .map(|&c| dequant_fp16_trick(c, params.scale_bits, params.zero_bits))
                .collect(),
            KvBits::Eight => {
                let s = f64_from_f16_bits(params.scale_bits);
                let z = f64_from_f16_bits(params.zero_bits);
                codes
                    .iter()
                    .map(|&c| round_to_f16((c as f64 - z) * s))
                    .collect()
            }
        })
    }

    /// Frozen byte image of one page, for serialization and golden tests.
    /// Per head, per occupied slot: packed K codes, packed V codes, then
    /// k_scale, k_zero, v_scale, v_zero as little-endian fp16 bits. 4-bit
    /// codes pack two per byte, low nibble first.
    pub fn page_bytes(&self, page_idx: usize) -> Result<Vec<u8>> {
        let page = self
            .pages
            .get(page_idx)
            .ok_or_else(|| Error::Shape(format!("page {page_idx} of {}", self.pages.len())))?;
        let mut out = Vec::new();
        for slots in &page.slots {
            for slot in slots {
                pack_codes(&slot.k_codes, self.bits, &mut out);
                pack_codes(&slot.v_codes, self.bits, &mut out);
                for bits in [
                    slot.k_params.scale_bits,
                    slot.k_params.zero_bits,
                    slot.v_params.scale_bits,
                    slot.v_params.zero_bits,
                ] {
                    out.extend_from_slice(&bits.to_le_bytes());
                }
            }
        }
        Ok(out)
    }
}

fn pack_codes(codes: &[u8], bits: KvBits, out: &mut Vec<u8>) {
    match bits {
        KvBits::Eight => out.extend_from_slice(codes),
        KvBits::Four => {
            for pair in codes.chunks(2) {
                out.push(pair[0] | (pair.get(1).copied().unwrap_or(0) << 4));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// dequantization paths

/// ALU operations the traced dequantizers record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AluOp {
    BitOr,
    Fma,
    Shr,
    And,
    IntToFloat,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DequantPath {
    Naive,
    Trick,
}

/// Number of per-element ALU ops each path costs, measured by running the
/// traced implementation.
pub fn dequant_ops_count(path: DequantPath) -> usize {
    match path {
        DequantPath::Trick => dequant_fp16_trick_traced(5, 0x3C00, 0x4800).1.len(),
        DequantPath::Naive => dequant_naive_traced(0x53, false, 0x3C00, 0x4800).1.len(),
    }
}

/// Splice the 4-bit code into the mantissa of fp16 1024.0: 0x6400 has
/// exponent 2^10 and an all-zero mantissa, so OR-ing the nibble yields
/// exactly 1024 + code. One fused multiply-add against the precomputed
/// constant -(1024 + zero) * scale then lands on (code - zero) * scale.
pub fn dequant_fp16_trick(code: u8, scale_bits: u16, zero_bits: u16) -> f64 {
    dequant_fp16_trick_traced(code, scale_bits, zero_bits).0
}

pub fn dequant_fp16_trick_traced(
    code: u8,
    scale_bits: u16,
    zero_bits: u16,
) -> (f64, Vec<AluOp>) {
    debug_assert!(code <= 15);
    let mut ops = Vec::new();
    let biased = 0x6400u16 | code as u16;
    ops.push(AluOp::BitOr);
    // the constant is prepared once per (scale, zero) pair, off the per-code
    // path; it must be formed in wide precision -- both factors are fp16
    // values, so their product is exact in f64
    let s = f64_from_f16_bits(scale_bits);
    let z = f64_from_f16_bits(zero_bits);
    let c = -(1024.0 + z) * s;
    let fused = f64_from_f16_bits(biased).mul_add(s, c);
    ops.push(AluOp::Fma);
    (round_to_f16(fused), ops)
}

/// Reference dequantization in plain f64, no fp16 output rounding.
pub fn dequant_reference(code: u8, scale_bits: u16, zero_bits: u16) -> f64 {
    let s = f64_from_f16_bits(scale_bits);
    let z = f64_from_f16_bits(zero_bits);
    (code as f64 - z) * s
}

/// The conventional path on a packed byte: shift, mask, int-to-float
/// conversion, subtract, multiply -- five ops per element.
pub fn dequant_naive_traced(
    packed: u8,
    high_nibble: bool,
    scale_bits: u16,
    zero_bits: u16,
) -> (f64, Vec<AluOp>) {
    let mut ops = Vec::new();
    let shifted = if high_nibble { packed >> 4 } else { packed };
    ops.push(AluOp::Shr);
    let code = shifted & 0x0F;
    ops.push(AluOp::And);
    let as_float = code as f64;
    ops.push(AluOp::IntToFloat);
    let centered = as_float - f64_from_f16_bits(zero_bits);
    ops.push(AluOp::Sub);
    let scaled = centered * f64_from_f16_bits(scale_bits);
    ops.push(AluOp::Mul);
    (round_to_f16(scaled), ops)
}

// ---------------------------------------------------------------------------
// decode attention over the cache

/// Full-precision single-query attention; shared by tests and the reference
/// path. `q` and the key/value rows are one head's vectors.
pub fn attention_reference(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let d = q.len();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let mut out = vec![0.0; d];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / norm * x;
        }
    }
    out
}

/// One decode step over the cached tokens: queries are heads x head_dim,
/// query head h reads kv head h / (heads / kv_heads). When smoothing scales
/// are supplied (one per kv head, as fused into the projections at
/// calibration time), queries are multiplied by lambda to compensate the
/// keys having been stored divided by it.
pub fn attention_decode(
    store: &KvPageStore,
    q: &Matrix,
    smooth: Option<&[SmoothScales]>,
) -> Result<Matrix> {
    if store.is_empty() {
        return Err(Error::EmptyCache);
    }
    if q.cols != store.head_dim || q.rows == 0 || q.rows % store.kv_heads != 0 {
        return Err(Error::Shape(format!(
            "queries {}x{} vs {} kv heads of dim {}",
            q.rows, q.cols, store.kv_heads, store.head_dim
        )));
    }
    if let Some(s) = smooth {
        if s.len() != store.kv_heads {
            return Err(Error::Shape("one smoothing vector per kv head".into()));
        }
        for sc in s {
            if sc.lambda.len() != store.head_dim {
                return Err(Error::Shape("smoothing dim vs head dim".into()));
            }
        }
    }
    let group = q.rows / store.kv_heads;
    let mut out = Matrix::zeros(q.rows, store.head_dim);
    for h in 0..q.rows {
        let kv_head = h / group;
        let mut qv: Vec<f64> = q.row(h).to_vec();
        if let Some(s) = smooth {
            for (x, l) in qv.iter_mut().zip(&s[kv_head].lambda) {
                *x *= l;
            }
        }
        let keys: Vec<Vec<f64>> = (0..store.tokens)
            .map(|t| store.key(kv_head, t))
            .collect::<Result<_>>()?;
        let values: Vec<Vec<f64>> = (0..store.tokens)
            .map(|t| store.value(kv_head, t))
            .collect::<Result<_>>()?;
        let o = attention_reference(&qv, &keys, &values);
        for (c, v) in o.iter().enumerate() {
            out.set(h, c, *v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::smooth_attention_scales;
    use crate::f16::f16_ulp_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-amp..amp)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn mantissa_splice_is_exact() {
        for code in 0u8..16 {
            let spliced = f64_from_f16_bits(0x6400 | code as u16);
            assert_eq!(spliced, 1024.0 + code as f64);
        }
    }

    #[test]
    fn trick_matches_reference_within_one_ulp() {
        // every (code, zero) with a large sample of scales, plus random scales
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut checked = 0u64;
        for _ in 0..400 {
            let scale_bits = f16_bits_from_f64(10f64.powf(rng.gen_range(-4.0..2.0)));
            for zero in 0u8..16 {
                let zero_bits = f16_bits_from_f64(zero as f64);
                for code in 0u8..16 {
                    let fast = dequant_fp16_trick(code, scale_bits, zero_bits);
                    let exact = dequant_reference(code, scale_bits, zero_bits);
                    let d = f16_ulp_distance(f16_bits_from_f64(fast), f16_bits_from_f64(exact));
                    assert!(d <= 1, "code {code} zero {zero}: {fast} vs {exact}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 100_000);
    }

    #[test]
    fn trick_and_naive_agree_bitwise() {
        // both paths apply a single fp16 rounding to the same exact product,
        // so they do not merely agree to a ulp -- they are identical
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..2000 {
            let scale_bits = f16_bits_from_f64(10f64.powf(rng.gen_range(-4.0..2.0)));
            let zero: u8 = rng.gen_range(0..16);
            let zero_bits = f16_bits_from_f64(zero as f64);
            let c0: u8 = rng.gen_range(0..16);
            let c1: u8 = rng.gen_range(0..16);
            let packed = c0 | (c1 << 4);
            let (lo, _) = dequant_naive_traced(packed, false, scale_bits, zero_bits);
            let (hi, _) = dequant_naive_traced(packed, true, scale_bits, zero_bits);
            assert_eq!(lo, dequant_fp16_trick(c0, scale_bits, zero_bits));
            assert_eq!(hi, dequant_fp16_trick(c1, scale_bits, zero_bits));
        }
    }

    #[test]
    fn op_counts_are_two_and_five() {
        assert_eq!(dequant_ops_count(DequantPath::Trick), 2);
        assert_eq!(dequant_ops_count(DequantPath::Naive), 5);
        let (_, ops) = dequant_fp16_trick_traced(9, 0x2E66, 0x4700);
        assert_eq!(ops, vec![AluOp::BitOr, AluOp::Fma]);
        let (_, ops) = dequant_naive_traced(0x9A, true, 0x2E66, 0x4700);
        assert_eq!(
            ops,
            vec![AluOp::Shr, AluOp::And, AluOp::IntToFloat, AluOp::Sub, AluOp::Mul]
        );
    }

    #[test]
    fn roundtrip_error_bounded_by_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..200 {
            let d = 16;
            let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let (codes, params) = quantize_head_row(&row, KvBits::Four);
            let s = f64_from_f16_bits(params.scale_bits);
            for (c, orig) in codes.iter().zip(&row) {
                let back = dequant_fp16_trick(*c, params.scale_bits, params.zero_bits);
                // half a step, plus the fp16-rounded scale stretching the
                // grid by up to 15 * 2^-11 steps at the clamped ends
                assert!((back - orig).abs() <= 0.51 * s + 1e-6);
            }
        }
    }

    #[test]
    fn eight_bit_cache_is_finer_than_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let (heads, d, tokens) = (2, 16, 40);
        let mut s4 = KvPageStore::new(heads, d, 8, KvBits::Four).unwrap();
        let mut s8 = KvPageStore::new(heads, d, 8, KvBits::Eight).unwrap();
        let mut originals = Vec::new();
        for _ in 0..tokens {
            let k = random_matrix(&mut rng, heads, d, 3.0);
            let v = random_matrix(&mut rng, heads, d, 3.0);
            s4.append_token(&k, &v).unwrap();
            s8.append_token(&k, &v).unwrap();
            originals.push((k, v));
        }
        let mut err4 = 0.0;
        let mut err8 = 0.0;
        for t in 0..tokens {
            for h in 0..heads {
                for c in 0..d {
                    let k_true = originals[t].0.get(h, c);
                    err4 += (s4.key(h, t).unwrap()[c] - k_true).powi(2);
                    err8 += (s8.key(h, t).unwrap()[c] - k_true).powi(2);
                }
            }
        }
        assert!(err8 < err4, "8-bit {err8} vs 4-bit {err4}");
    }

    #[test]
    fn paging_is_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let (heads, d, tokens) = (2, 8, 37);
        let qs = random_matrix(&mut rng, 4, d, 1.0);
        let mut outs = Vec::new();
        for page_size in [1, 5, 64, 1000] {
            let mut rng = ChaCha8Rng::seed_from_u64(65);
            let mut store = KvPageStore::new(heads, d, page_size, KvBits::Four).unwrap();
            for _ in 0..tokens {
                let k = random_matrix(&mut rng, heads, d, 2.0);
                let v = random_matrix(&mut rng, heads, d, 2.0);
                store.append_token(&k, &v).unwrap();
            }
            outs.push((attention_decode(&store, &qs, None).unwrap(), store.num_pages()));
        }
        for (o, _) in &outs {
            assert_eq!(o.data(), outs[0].0.data(), "page size must not change results");
        }
        assert_eq!(outs.iter().map(|(_, p)| *p).collect::<Vec<_>>(), vec![37, 8, 1, 1]);
    }

    #[test]
    fn page_count_tracks_default_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut store = KvPageStore::new(1, 4, DEFAULT_PAGE_SIZE, KvBits::Four).unwrap();
        for _ in 0..130 {
            let k = random_matrix(&mut rng, 1, 4, 1.0);
            store.append_token(&k.clone(), &k).unwrap();
        }
        assert_eq!(store.num_pages(), 3); // 64 + 64 + 2
        assert_eq!(store.len(), 130);
    }

    #[test]
    fn grouped_queries_share_kv_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (kv_heads, d) = (2, 8);
        let mut store = KvPageStore::new(kv_heads, d, 16, KvBits::Four).unwrap();
        for _ in 0..10 {
            let k = random_matrix(&mut rng, kv_heads, d, 1.0);
            let v = random_matrix(&mut rng, kv_heads, d, 1.0);
            store.append_token(&k, &v).unwrap();
        }
        // four query heads, two per kv head; identical queries within a
        // group must produce identical outputs
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut qdata = Vec::new();
        for _ in 0..4 {
            qdata.extend_from_slice(&row);
        }
        let q = Matrix::from_vec(4, d, qdata).unwrap();
        let out = attention_decode(&store, &q, None).unwrap();
        assert_eq!(out.row(0), out.row(1)); // kv head 0
        assert_eq!(out.row(2), out.row(3)); // kv head 1
        assert_ne!(out.row(0), out.row(2));
    }

    #[test]
    fn empty_cache_is_an_error() {
        let store = KvPageStore::new(1, 4, 8, KvBits::Four).unwrap();
        let q = Matrix::zeros(1, 4);
        assert!(matches!(attention_decode(&store, &q, None), Err(Error::EmptyCache)));
    }

    #[test]
    fn smoothing_compensation_is_exact_in_full_precision() {
        // with exact (unquantized) keys, smoothed storage plus query
        // compensation reproduces unsmoothed attention
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let d = 8;
        let tokens = 12;
        let keys: Vec<Vec<f64>> = (0..tokens)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let values: Vec<Vec<f64>> = (0..tokens)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut k_cal = Matrix::zeros(tokens, d);
        for (t, k) in keys.iter().enumerate() {
            for (c, v) in k.iter().enumerate() {
                k_cal.set(t, c, *v);
            }
        }
        let s = smooth_attention_scales(&k_cal, 0.5).unwrap();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let plain = attention_reference(&q, &keys, &values);
        let keys_smoothed: Vec<Vec<f64>> = keys
            .iter()
            .map(|k| k.iter().zip(&s.lambda).map(|(v, l)| v / l).collect())
            .collect();
        let q_comp: Vec<f64> = q.iter().zip(&s.lambda).map(|(v, l)| v * l).collect();
        let smoothed = attention_reference(&q_comp, &keys_smoothed, &values);
        for (a, b) in plain.iter().zip(&smoothed) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn smoothing_shrinks_quantized_key_error_on_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let (tokens, d) = (48, 16);
        let mut k_cal = Matrix::zeros(tokens, d);
        for t in 0..tokens {
            for c in 0..d {
                let amp = if c == 3 || c == 11 { 40.0 } else { 1.0 };
                k_cal.set(t, c, rng.gen_range(-1.0..1.0) * amp);
            }
        }
        let s = smooth_attention_scales(&k_cal, 0.5).unwrap();
        let quant_err = |rows: &Matrix| {
            let mut err = 0.0;
            for t in 0..rows.rows {
                let (codes, params) = quantize_head_row(rows.row(t), KvBits::Four);
                for (c, orig) in codes.iter().zip(rows.row(t)) {
                    let back = dequant_fp16_trick(*c, params.scale_bits, params.zero_bits);
                    err += (back - orig) * (back - orig);
                }
            }
            err
        };
        let mut smoothed = k_cal.clone();
        for t in 0..tokens {
            for c in 0..d {
                smoothed.set(t, c, smoothed.get(t, c) / s.lambda[c]);
            }
        }
        // compare in the original domain: scale the smoothed error back up
        let mut err_smoothed = 0.0;
        for t in 0..tokens {
            let (codes, params) = quantize_head_row(smoothed.row(t), KvBits::Four);
            for (c, (code, orig)) in codes.iter().zip(smoothed.row(t)).enumerate() {
                let back = dequant_fp16_trick(*code, params.scale_bits, params.zero_bits);
                let delta = (back - orig) * s.lambda[c];
                err_smoothed += delta * delta;
            }
        }
        assert!(
            err_smoothed < quant_err(&k_cal),
            "smoothing should reduce key error: {err_smoothed} vs {}",
            quant_err(&k_cal)
        );
    }

    #[test]
    fn page_bytes_layout_is_stable() {
        let mut store = KvPageStore::new(1, 4, 2, KvBits::Four).unwrap();
        let k = Matrix::from_vec(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let v = Matrix::from_vec(1, 4, vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        store.append_token(&k, &v).unwrap();
        let bytes = store.page_bytes(0).unwrap();
        // 4 K codes packed into 2 bytes, 4 V codes into 2, then 4 fp16 params
        assert_eq!(bytes.len(), 2 + 2 + 8);
        // range [0,3] over 15 codes: scale 3/15 = 0.2, zero 0 -> code(x) = 5x
        assert_eq!(bytes[0], 5 << 4); // K codes 0,5 packed low-first
        assert_eq!(bytes[1], 10 | (15 << 4)); // K codes 10,15
        assert_eq!(bytes[2], 15 | (10 << 4)); // V codes 15,10
        assert_eq!(bytes[3], 5); // V codes 5,0
        let scale = u16::from_le_bytes([bytes[4], bytes[5]]);
        assert_eq!(scale, f16_bits_from_f64(0.2));
        assert!(store.page_bytes(1).is_err());
    }
}
