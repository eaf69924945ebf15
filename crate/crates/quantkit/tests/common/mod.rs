//! Shared builders for the golden-fixture and acceptance test binaries.
//! Everything here is seeded, so two independent runs (on any platform)
//! must produce byte-identical artifacts.

use std::path::PathBuf;

use quantkit::container::Container;
use quantkit::exec::pack_weight_tiles;
use quantkit::pipeline::{apply_qoq, calibrate, crafted_suite_entry, BlockDims, QuantRecipe};
use quantkit::progressive::quantize_progressive;
use quantkit::serialize::{write_quantized_block, write_toy_block, KIND_QUANTIZED, KIND_TOY_BLOCK};
use quantkit::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
}

/// A plain float block container.
pub fn golden_toy_container() -> Container {
    let (block, _, _) = crafted_suite_entry(71, BlockDims::toy()).unwrap();
    let mut c = Container::new();
    c.add_note("kind", KIND_TOY_BLOCK).unwrap();
    write_toy_block(&mut c, "block.", &block).unwrap();
    c
}

/// A fully quantized block (every pipeline stage on) next to its source.
pub fn golden_quantized_container() -> Container {
    let (block, x_calib, _) = crafted_suite_entry(71, BlockDims::toy()).unwrap();
    let stats = calibrate(&block, &x_calib).unwrap();
    let qb = apply_qoq(&block, &QuantRecipe::full(32), &stats).unwrap();
    let mut c = Container::new();
    c.add_note("kind", KIND_QUANTIZED).unwrap();
    write_toy_block(&mut c, "block.", &block).unwrap();
    write_quantized_block(&mut c, "quant.", &qb).unwrap();
    c
}

/// Packed compute-order weight tiles as raw bytes.
pub fn golden_tile_bytes() -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let w = synth::heavy_tailed_weights(&mut rng, 32, 64, 1.0);
    let pw = quantize_progressive(&w, 16).unwrap();
    let tiles = pack_weight_tiles(&pw).unwrap();
    let mut bytes = Vec::with_capacity(tiles.len() * 512);
    for t in &tiles {
        bytes.extend_from_slice(&t.bytes);
    }
    bytes
}
