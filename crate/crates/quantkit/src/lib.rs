//! Post-training W4A8KV4 quantization, simulated end to end.
//!
//! The crate covers the whole path from a float transformer block to
//! low-bit execution: the two-level progressive weight scheme whose
//! intermediates provably fit int8, the calibration-time transforms that
//! make 4-bit tenable (rotation, smoothing, channel reorder, clip search),
//! a register-accurate model of the fused dequantize-GEMM pipeline, a
//! paged 4-bit KV cache with the fp16-splice decode trick, and a roofline
//! model that says when any of this pays off.
//!
//! Everything is f64 underneath and bit-deterministic: the integer paths
//! are exact by construction, the float paths are reproducible down to the
//! last bit given the same seed.

pub mod calib;
pub mod check;
pub mod container;
pub mod error;
pub mod exec;
pub mod f16;
pub mod kv;
pub mod matrix;
pub mod pipeline;
pub mod progressive;
pub mod quant;
pub mod roofline;
pub mod serialize;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::Matrix;
