//! Built-in verification suites behind the `check` subcommand.
//!
//! Each suite re-derives one of the load-bearing guarantees from scratch —
//! no fixtures, no tolerance tuning — and reports a line per property so a
//! failure says what broke, not just that something did.

use crate::error::{Error, Result};
use crate::exec::{
    gemm_w4a8_per_channel, gemm_w4a8_per_group, order_matters_demo, pack_weight_tiles,
    precompute_token_sums, sweep_lane_soundness, PerChannelWeight,
};
use crate::f16::{f16_ulp_distance, f64_from_f16_bits, round_to_f16};
use crate::kv::{
    dequant_fp16_trick_traced, dequant_naive_traced, dequant_ops_count, dequant_reference,
    DequantPath, KvBits, KvPageStore,
};
use crate::progressive::{protective_qmax, quantize_progressive, sweep_int8_guarantee};
use crate::quant::{quantize_matrix, Granularity, Scheme};
use crate::synth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SUITES: [&str; 4] = ["gemm", "lanes", "kv", "protective"];

#[derive(Debug)]
pub struct CheckReport {
    pub suite: String,
    pub passed: bool,
    pub lines: Vec<String>,
}

impl CheckReport {
    fn new(suite: &str) -> Self {
        CheckReport { suite: suite.to_string(), passed: true, lines: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: &str) {
        self.lines.push(format!("{} - {what}", if ok { "ok  " } else { "FAIL" }));
        self.passed &= ok;
    }

    pub fn render(&self) -> String {
        let mut s = format!("suite {}\n", self.suite);
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s.push_str(&format!(
            "suite {} {}\n",
            self.suite,
            if self.passed { "passed" } else { "FAILED" }
        ));
        s
    }
}

pub fn run_suite(name: &str) -> Result<CheckReport> {
    match name {
        "gemm" => Ok(check_gemm()),
        "lanes" => Ok(check_lanes()),
        "kv" => Ok(check_kv()),
        "protective" => Ok(check_protective()),
        _ => Err(Error::InvalidInput(format!(
            "unknown suite {name:?}; expected one of {SUITES:?}"
        ))),
    }
}

fn check_protective() -> CheckReport {
    let mut r = CheckReport::new("protective");
    let bound = protective_qmax(8, 4);
    r.check(bound == 119, &format!("derived protective bound = {bound} (want 119)"));

    let safe = sweep_int8_guarantee(bound);
    r.check(
        safe.violations == 0,
        &format!("full sweep at {bound}: {} cases, {} violations", safe.cases, safe.violations),
    );

    let unsafe_sweep = sweep_int8_guarantee(bound + 1);
    let detail = match &unsafe_sweep.witness {
        Some(v) => format!(
            "bound {} overflows: q={} group [{},{}] -> recon {}",
            bound + 1,
            v.q,
            v.lo,
            v.hi,
            v.recon
        ),
        None => format!("bound {} shows no overflow witness", bound + 1),
    };
    r.check(unsafe_sweep.violations > 0, &detail);
    r
}

fn check_lanes() -> CheckReport {
    let mut r = CheckReport::new("lanes");
    let sweep = sweep_lane_soundness();
    let total = sweep.admissible + sweep.skipped;
    r.check(total == 4096, &format!("parameter cube covered: {total} triples"));
    r.check(
        sweep.failures.is_empty(),
        &format!(
            "multiply-then-subtract exact on all {} admissible triples",
            sweep.admissible
        ),
    );
    match order_matters_demo() {
        Some(w) => r.check(
            true,
            &format!(
                "subtract-first corrupts lane {}: code={} zero={} scale={} gives {:?} (want {})",
                w.bad_lane, w.code, w.zero, w.scale, w.sub_first, w.expected
            ),
        ),
        None => r.check(false, "no subtract-first counterexample found"),
    }
    r
}

fn check_gemm() -> CheckReport {
    let mut r = CheckReport::new("gemm");
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    let mut worst_channel = 0.0f64;
    let mut worst_group = 0.0f64;
    for _ in 0..20 {
        let m = 2 + rng.gen_range(0..5);
        let x = synth::gaussian_matrix(&mut rng, m, 64, 1.0);
        let w = synth::heavy_tailed_weights(&mut rng, 32, 64, 0.6);
        let qx = quantize_matrix(&x, 8, Scheme::SymmetricSigned, Granularity::PerChannel)
            .expect("activation quantization");
        let xd = qx.dequantize();

        let qw = quantize_matrix(&w, 4, Scheme::AsymmetricUnsigned, Granularity::PerChannel)
            .expect("weight quantization");
        let pcw = PerChannelWeight::from_quantized(&qw).expect("weight packing");
        let sums = precompute_token_sums(&qx).expect("token sums");
        let fused = gemm_w4a8_per_channel(&qx, &pcw, &sums).expect("fused gemm");
        let reference = xd.matmul_nt(&pcw.dequantize()).expect("reference gemm");
        worst_channel = worst_channel.max(max_rel(&reference, &fused));

        let pw = quantize_progressive(&w, 16).expect("progressive quantization");
        let tiles = pack_weight_tiles(&pw).expect("tile packing");
        let fused = gemm_w4a8_per_group(&qx, &pw, &tiles).expect("per-group gemm");
        let reference = xd.matmul_nt(&pw.dequantize().expect("dequant")).expect("reference");
        worst_group = worst_group.max(max_rel(&reference, &fused));
    }
    r.check(
        worst_channel <= 1e-9,
        &format!("per-channel fused epilogue max relative error {worst_channel:.3e}"),
    );
    r.check(
        worst_group <= 1e-9,
        &format!("per-group tiled path max relative error {worst_group:.3e}"),
    );
    r
}

fn max_rel(reference: &crate::matrix::Matrix, got: &crate::matrix::Matrix) -> f64 {
    let num: f64 = reference
        .data()
        .iter()
        .zip(got.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den = reference.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn check_kv() -> CheckReport {
    let mut r = CheckReport::new("kv");
    let mut rng = ChaCha8Rng::seed_from_u64(0x4B56);

    // splice-based dequantization vs the unrounded product, all codes x
    // random parameters
    let mut worst_ulp = 0u32;
    let mut trick_naive_identical = true;
    for _ in 0..200 {
        let s = round_to_f16(rng.gen_range(0.01f64..8.0));
        let z = rng.gen_range(0.0f64..15.0).round();
        let s_bits = crate::f16::f16_bits_from_f64(s);
        let z_bits = crate::f16::f16_bits_from_f64(z);
        for code in 0u8..16 {
            let (trick, _) = dequant_fp16_trick_traced(code, s_bits, z_bits);
            let exact = dequant_reference(code, s_bits, z_bits);
            worst_ulp = worst_ulp.max(f16_ulp_distance(
                crate::f16::f16_bits_from_f64(trick),
                crate::f16::f16_bits_from_f64(exact),
            ));
            let packed = code | (code << 4);
            let (naive, _) = dequant_naive_traced(packed, false, s_bits, z_bits);
            trick_naive_identical &= trick.to_bits() == naive.to_bits();
        }
    }
    r.check(worst_ulp <= 1, &format!("trick vs exact product: worst {worst_ulp} f16 ulp"));
    r.check(trick_naive_identical, "trick and naive paths agree bitwise");

    let (t_ops, n_ops) =
        (dequant_ops_count(DequantPath::Trick), dequant_ops_count(DequantPath::Naive));
    r.check(
        t_ops == 2 && n_ops == 5,
        &format!("ALU ops per element: trick {t_ops} (want 2), naive {n_ops} (want 5)"),
    );

    // paged store round-trip error stays within the step-size bound
    let mut bound_ok = true;
    let mut store = KvPageStore::new(2, 16, 7, KvBits::Four).expect("store");
    let mut originals = Vec::new();
    for _ in 0..40 {
        let k = synth::gaussian_matrix(&mut rng, 2, 16, 2.0);
        let v = synth::gaussian_matrix(&mut rng, 2, 16, 2.0);
        store.append_token(&k, &v).expect("append");
        originals.push((k, v));
    }
    for (t, (k, v)) in originals.iter().enumerate() {
        let (ks, vs) = (store.key(0, t).expect("key"), store.value(0, t).expect("value"));
        for c in 0..16 {
            let (k_slot, v_slot) = store.slot_params(0, t).expect("params");
            let ks_scale = f64_from_f16_bits(k_slot.scale_bits);
            let vs_scale = f64_from_f16_bits(v_slot.scale_bits);
            bound_ok &= (ks[c] - k.get(0, c)).abs() <= 0.51 * ks_scale + 1e-6;
            bound_ok &= (vs[c] - v.get(0, c)).abs() <= 0.51 * vs_scale + 1e-6;
        }
    }
    r.check(bound_ok, "paged round-trip error within half a step (plus f16 slack)");
    r.check(store.num_pages() == 6, &format!("40 tokens / page 7 -> {} pages", store.num_pages()));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for name in SUITES {
            let report = run_suite(name).unwrap();
            assert!(report.passed, "suite {name} failed:\n{}", report.render());
            assert!(!report.lines.is_empty());
            assert!(report.render().contains("passed"));
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope").is_err());
    }
}
