//! Container codecs for float and quantized blocks.
//!
//! Everything deterministic in the block round-trips exactly: float tensors
//! are stored as raw f64 bits, quantized weights as their code streams plus
//! packed parameters, and scalar metadata as shortest-round-trip decimal
//! notes. Structures that are pure functions of stored data (Hadamard
//! rotations, execution tiles) are rebuilt on load instead of stored.

use crate::calib::{hadamard, ChannelPermutation, SmoothScales};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::exec::{pack_weight_tiles, PerChannelWeight};
use crate::kv::KvBits;
use crate::matrix::Matrix;
use crate::pipeline::{
    BlockDims, LinearState, QuantWeight, QuantizedBlock, ToyBlock, WorkingModel, LINEAR_NAMES,
};
use crate::progressive::ProgressiveWeight;

pub const KIND_TOY_BLOCK: &str = "toy-block";
pub const KIND_QUANTIZED: &str = "quantized-block";

fn dims_note(d: &BlockDims) -> String {
    format!("{} {} {} {} {}", d.heads, d.kv_heads, d.head_dim, d.hidden, d.ffn_mult)
}

fn parse_dims(s: &str) -> Result<BlockDims> {
    let v: Vec<usize> = s
        .split(' ')
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Container(format!("bad dims note {s:?}")))?;
    if v.len() != 5 {
        return Err(Error::Container(format!("bad dims note {s:?}")));
    }
    let dims =
        BlockDims { heads: v[0], kv_heads: v[1], head_dim: v[2], hidden: v[3], ffn_mult: v[4] };
    dims.validate()?;
    Ok(dims)
}

/// f64 as text that parses back to the identical bits.
fn f64_note(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Container(format!("bad float note {s:?}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Container(format!("bad bool note {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// float blocks

pub fn write_toy_block(c: &mut Container, prefix: &str, block: &ToyBlock) -> Result<()> {
    c.add_note(&format!("{prefix}dims"), &dims_note(&block.dims))?;
    c.put_matrix(&format!("{prefix}w_qkv"), &block.w_qkv)?;
    c.put_matrix(&format!("{prefix}w_o"), &block.w_o)?;
    c.put_matrix(&format!("{prefix}w_ffn1"), &block.w_ffn1)?;
    c.put_matrix(&format!("{prefix}w_ffn2"), &block.w_ffn2)?;
    c.put_f64_vec(&format!("{prefix}ln1_gamma"), &block.ln1_gamma)?;
    c.put_f64_vec(&format!("{prefix}ln1_beta"), &block.ln1_beta)?;
    c.put_f64_vec(&format!("{prefix}ln2_gamma"), &block.ln2_gamma)?;
    c.put_f64_vec(&format!("{prefix}ln2_beta"), &block.ln2_beta)?;
    Ok(())
}

pub fn read_toy_block(c: &Container, prefix: &str) -> Result<ToyBlock> {
    let dims = parse_dims(c.require_note(&format!("{prefix}dims"))?)?;
    let mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        let m = c.get_matrix(&format!("{prefix}{name}"))?;
        if m.rows != rows || m.cols != cols {
            return Err(Error::Container(format!(
                "{name}: {}x{} vs expected {rows}x{cols}",
                m.rows, m.cols
            )));
        }
        Ok(m)
    };
    let vec = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = c.get_f64_vec(&format!("{prefix}{name}"))?;
        if v.len() != len {
            return Err(Error::Container(format!("{name}: {} vs expected {len}", v.len())));
        }
        Ok(v)
    };
    let h = dims.hidden;
    Ok(ToyBlock {
        dims,
        w_qkv: mat("w_qkv", dims.qkv_rows(), h)?,
        w_o: mat("w_o", h, dims.heads * dims.head_dim)?,
        w_ffn1: mat("w_ffn1", dims.ffn(), h)?,
        w_ffn2: mat("w_ffn2", h, dims.ffn())?,
        ln1_gamma: vec("ln1_gamma", h)?,
        ln1_beta: vec("ln1_beta", h)?,
        ln2_gamma: vec("ln2_gamma", h)?,
        ln2_beta: vec("ln2_beta", h)?,
    })
}

// ---------------------------------------------------------------------------
// quantized blocks

pub fn write_quantized_block(c: &mut Container, prefix: &str, qb: &QuantizedBlock) -> Result<()> {
    let m = &qb.model;
    c.add_note(&format!("{prefix}dims"), &dims_note(&m.dims))?;
    c.add_note(&format!("{prefix}recipe"), &qb.recipe_summary)?;
    c.add_note(&format!("{prefix}act8"), if qb.act8 { "true" } else { "false" })?;
    let kv_text = match qb.kv {
        None => "none".to_string(),
        Some((KvBits::Four, page)) => format!("4 {page}"),
        Some((KvBits::Eight, page)) => format!("8 {page}"),
    };
    c.add_note(&format!("{prefix}kv"), &kv_text)?;
    c.put_f64_vec(&format!("{prefix}ln1_gamma"), &m.ln1_gamma)?;
    c.put_f64_vec(&format!("{prefix}ln1_beta"), &m.ln1_beta)?;
    c.put_f64_vec(&format!("{prefix}ln2_gamma"), &m.ln2_gamma)?;
    c.put_f64_vec(&format!("{prefix}ln2_beta"), &m.ln2_beta)?;

    if let Some(scales) = &m.smooth_attn {
        c.add_note(&format!("{prefix}smooth_attn.alpha"), &f64_note(scales[0].alpha))?;
        for (j, s) in scales.iter().enumerate() {
            c.put_f64_vec(&format!("{prefix}smooth_attn.{j}"), &s.lambda)?;
        }
    }

    for (i, name) in LINEAR_NAMES.iter().enumerate() {
        let p = format!("{prefix}linear.{name}.");
        let ls = &m.linears[i];
        c.add_note(&format!("{p}rotate"), if ls.rotation.is_some() { "true" } else { "false" })?;
        c.add_note(&format!("{p}clip"), &f64_note(ls.clip))?;
        if let Some(lambda) = &ls.smooth {
            c.put_f64_vec(&format!("{p}smooth"), lambda)?;
        }
        if let Some(perm) = &ls.perm {
            let as_f64: Vec<f64> = perm.perm.iter().map(|&x| x as f64).collect();
            c.put_f64_vec(&format!("{p}perm"), &as_f64)?;
        }
        match &qb.weights[i] {
            QuantWeight::Float(w) => {
                c.add_note(&format!("{p}mode"), "float")?;
                c.put_matrix(&format!("{p}w"), w)?;
            }
            QuantWeight::PerChannel(pcw) => {
                c.add_note(&format!("{p}mode"), "per-channel-u4")?;
                c.put_u4(&format!("{p}codes"), pcw.n, pcw.k, &pcw.codes)?;
                c.put_f64_vec(&format!("{p}scales"), &pcw.scales)?;
                let zeros_u8: Vec<u8> = pcw.zeros.iter().map(|&z| z as u8).collect();
                c.put_u8(&format!("{p}zeros"), 1, pcw.n, &zeros_u8)?;
            }
            QuantWeight::Group { pw, .. } => {
                c.add_note(&format!("{p}mode"), &format!("progressive-g{}", pw.group))?;
                c.add_note(&format!("{p}q_bound"), &pw.q_bound.to_string())?;
                c.put_u4(&format!("{p}codes"), pw.rows, pw.cols, &pw.codes)?;
                c.put_f16_bits(&format!("{p}s0"), 1, pw.rows, &pw.s0_bits)?;
                let gpr = pw.groups_per_row();
                c.put_u8(&format!("{p}s1"), pw.rows, gpr, &pw.s1)?;
                c.put_u8(&format!("{p}zeros"), pw.rows, gpr, &pw.zeros)?;
            }
        }
    }
    Ok(())
}

pub fn read_quantized_block(c: &Container, prefix: &str) -> Result<QuantizedBlock> {
    let dims = parse_dims(c.require_note(&format!("{prefix}dims"))?)?;
    let recipe_summary = c.require_note(&format!("{prefix}recipe"))?.to_string();
    let act8 = parse_bool(c.require_note(&format!("{prefix}act8"))?)?;
    let kv = match c.require_note(&format!("{prefix}kv"))? {
        "none" => None,
        other => {
            let (bits, page) = other
                .split_once(' ')
                .ok_or_else(|| Error::Container(format!("bad kv note {other:?}")))?;
            let bits = match bits {
                "4" => KvBits::Four,
                "8" => KvBits::Eight,
                _ => return Err(Error::Container(format!("bad kv bits {bits:?}"))),
            };
            let page: usize = page
                .parse()
                .map_err(|_| Error::Container(format!("bad kv page {page:?}")))?;
            Some((bits, page))
        }
    };
    let vec = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = c.get_f64_vec(&format!("{prefix}{name}"))?;
        if v.len() != len {
            return Err(Error::Container(format!("{name}: {} vs expected {len}", v.len())));
        }
        Ok(v)
    };
    let h = dims.hidden;

    let smooth_attn = if let Some(alpha) = c.note(&format!("{prefix}smooth_attn.alpha")) {
        let alpha = parse_f64(alpha)?;
        let mut all = Vec::with_capacity(dims.kv_heads);
        for j in 0..dims.kv_heads {
            let lambda = vec(&format!("smooth_attn.{j}"), dims.head_dim)?;
            let s = SmoothScales { lambda, alpha };
            s.validate()?;
            all.push(s);
        }
        Some(all)
    } else {
        None
    };

    // out x in shape of each linear, fixed by the block architecture
    let shapes = [
        (dims.qkv_rows(), h),
        (h, dims.heads * dims.head_dim),
        (dims.ffn(), h),
        (h, dims.ffn()),
    ];
    let mut linears = Vec::with_capacity(4);
    let mut weights = Vec::with_capacity(4);
    for (i, name) in LINEAR_NAMES.iter().enumerate() {
        let p = format!("{prefix}linear.{name}.");
        let (rows, cols) = shapes[i];
        let mode = c.require_note(&format!("{p}mode"))?;
        let (weight, w_float) = if mode == "float" {
            let w = c.get_matrix(&format!("{p}w"))?;
            if w.rows != rows || w.cols != cols {
                return Err(Error::Container(format!("{p}w has the wrong shape")));
            }
            (QuantWeight::Float(w.clone()), w)
        } else if mode == "per-channel-u4" {
            let (n, k, codes) = c.get_u4(&format!("{p}codes"))?;
            if (n, k) != (rows, cols) {
                return Err(Error::Container(format!("{p}codes has the wrong shape")));
            }
            let scales = vec(&format!("linear.{name}.scales"), n)?;
            let (_, zn, zeros_u8) = c.get_u8(&format!("{p}zeros"))?;
            if zn != n {
                return Err(Error::Container(format!("{p}zeros has the wrong shape")));
            }
            let pcw = PerChannelWeight {
                n,
                k,
                codes,
                scales,
                zeros: zeros_u8.iter().map(|&z| z as i32).collect(),
            };
            let w = pcw.dequantize();
            (QuantWeight::PerChannel(pcw), w)
        } else if let Some(g) = mode.strip_prefix("progressive-g") {
            let group: usize = g
                .parse()
                .map_err(|_| Error::Container(format!("bad weight mode {mode:?}")))?;
            let q_bound: i32 = c
                .require_note(&format!("{p}q_bound"))?
                .parse()
                .map_err(|_| Error::Container("bad q_bound note".into()))?;
            let (r, k, codes) = c.get_u4(&format!("{p}codes"))?;
            if (r, k) != (rows, cols) || group == 0 || cols % group != 0 {
                return Err(Error::Container(format!("{p}codes has the wrong shape")));
            }
            let (_, sn, s0_bits) = c.get_f16_bits(&format!("{p}s0"))?;
            let (s1r, s1c, s1) = c.get_u8(&format!("{p}s1"))?;
            let (zr, zc, zeros) = c.get_u8(&format!("{p}zeros"))?;
            let gpr = cols / group;
            if sn != rows || (s1r, s1c) != (rows, gpr) || (zr, zc) != (rows, gpr) {
                return Err(Error::Container(format!("{p}params have the wrong shape")));
            }
            let pw = ProgressiveWeight { rows, cols, group, s0_bits, s1, zeros, codes, q_bound };
            let tiles = pack_weight_tiles(&pw)?;
            let w = pw.dequantize()?;
            (QuantWeight::Group { pw, tiles }, w)
        } else {
            return Err(Error::Container(format!("unknown weight mode {mode:?}")));
        };

        let rotation = if parse_bool(c.require_note(&format!("{p}rotate"))?)? {
            Some(hadamard(cols)?)
        } else {
            None
        };
        let smooth = if c.has(&format!("{p}smooth")) {
            Some(vec(&format!("linear.{name}.smooth"), cols)?)
        } else {
            None
        };
        let perm = if c.has(&format!("{p}perm")) {
            let raw = vec(&format!("linear.{name}.perm"), cols)?;
            let idx: Vec<usize> = raw
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && v >= 0.0 && (v as usize) < cols {
                        Ok(v as usize)
                    } else {
                        Err(Error::Container(format!("bad permutation entry {v}")))
                    }
                })
                .collect::<Result<_>>()?;
            let p = ChannelPermutation { perm: idx };
            p.validate()?;
            Some(p)
        } else {
            None
        };
        let clip = parse_f64(c.require_note(&format!("{p}clip"))?)?;
        if !(clip > 0.0 && clip <= 1.0) {
            return Err(Error::Container(format!("bad clip ratio {clip}")));
        }
        linears.push(LinearState { w: w_float, rotation, smooth, perm, clip });
        weights.push(weight);
    }

    let model = WorkingModel {
        dims,
        linears: linears
            .try_into()
            .map_err(|_| Error::Container("linear count".into()))?,
        ln1_gamma: vec("ln1_gamma", h)?,
        ln1_beta: vec("ln1_beta", h)?,
        ln2_gamma: vec("ln2_gamma", h)?,
        ln2_beta: vec("ln2_beta", h)?,
        smooth_attn,
    };
    Ok(QuantizedBlock {
        model,
        weights: weights
            .try_into()
            .map_err(|_| Error::Container("weight count".into()))?,
        act8,
        kv,
        recipe_summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{
        apply_qoq, calibrate, crafted_suite_entry, QuantRecipe, WeightMode,
    };
    use crate::synth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_block_roundtrips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = ToyBlock::random(BlockDims::toy(), &mut rng).unwrap();
        let x = synth::gaussian_matrix(&mut rng, 6, 64, 1.0);

        let mut c = Container::new();
        c.add_note("kind", KIND_TOY_BLOCK).unwrap();
        write_toy_block(&mut c, "", &block).unwrap();
        let bytes = c.to_bytes();
        let back = read_toy_block(&Container::from_bytes(&bytes).unwrap(), "").unwrap();

        assert_eq!(back.dims, block.dims);
        assert_eq!(back.forward(&x).unwrap().data(), block.forward(&x).unwrap().data());
    }

    #[test]
    fn quantized_block_roundtrips_bit_exactly() {
        let (block, x_calib, x_eval) = crafted_suite_entry(31, BlockDims::toy()).unwrap();
        let stats = calibrate(&block, &x_calib).unwrap();
        for recipe in [
            QuantRecipe::full(64),
            QuantRecipe::rtn_baseline(),
            // lossless transforms over float weights
            QuantRecipe {
                rotate: true,
                reorder: true,
                output_smooth: Some(0.1),
                smooth_attention: Some(0.5),
                ..QuantRecipe::identity()
            },
        ] {
            let qb = apply_qoq(&block, &recipe, &stats).unwrap();
            let mut c = Container::new();
            c.add_note("kind", KIND_QUANTIZED).unwrap();
            write_quantized_block(&mut c, "q.", &qb).unwrap();
            let bytes = c.to_bytes();
            let back =
                read_quantized_block(&Container::from_bytes(&bytes).unwrap(), "q.").unwrap();

            assert_eq!(back.recipe_summary, qb.recipe_summary);
            assert_eq!(back.clip_ratios(), qb.clip_ratios());
            assert_eq!(
                back.forward(&x_eval).unwrap().data(),
                qb.forward(&x_eval).unwrap().data(),
                "recipe {} drifted through the container",
                qb.recipe_summary
            );
        }
    }

    #[test]
    fn group_mode_payload_shapes() {
        let (block, x_calib, _) = crafted_suite_entry(32, BlockDims::toy()).unwrap();
        let stats = calibrate(&block, &x_calib).unwrap();
        let recipe = QuantRecipe {
            weight_mode: WeightMode::ProgressiveGroup(64),
            ..QuantRecipe::rtn_baseline()
        };
        let qb = apply_qoq(&block, &recipe, &stats).unwrap();
        let mut c = Container::new();
        write_quantized_block(&mut c, "", &qb).unwrap();
        // qkv is 128x64: one group per row at g=64
        let (r, k, codes) = c.get_u4("linear.qkv.codes").unwrap();
        assert_eq!((r, k), (128, 64));
        assert_eq!(codes.len(), 128 * 64);
        let (_, sn, _) = c.get_f16_bits("linear.qkv.s0").unwrap();
        assert_eq!(sn, 128);
        let (s1r, s1c, _) = c.get_u8("linear.qkv.s1").unwrap();
        assert_eq!((s1r, s1c), (128, 1));
        assert_eq!(c.note("linear.qkv.mode"), Some("progressive-g64"));
        assert_eq!(c.note("linear.qkv.q_bound"), Some("119"));
    }

    #[test]
    fn read_rejects_missing_or_corrupt_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = ToyBlock::random(BlockDims::toy(), &mut rng).unwrap();
        let mut c = Container::new();
        write_toy_block(&mut c, "", &block).unwrap();
        // quantized reader on a float-block container
        assert!(read_quantized_block(&c, "").is_err());
        // wrong prefix
        assert!(read_toy_block(&c, "orig.").is_err());
        // corrupt dims note
        let mut bad = Container::new();
        bad.add_note("dims", "4 2 16 64").unwrap();
        assert!(read_toy_block(&bad, "").is_err());
        let mut bad = Container::new();
        bad.add_note("dims", "3 2 16 64 4").unwrap(); // heads not divisible
        assert!(read_toy_block(&bad, "").is_err());
    }

    #[test]
    fn float_notes_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, 0.7368421052631579, 1e-300, 123456.75] {
            assert_eq!(parse_f64(&f64_note(v)).unwrap(), v);
        }
        assert!(parse_f64("not-a-float").is_err());
    }
}
