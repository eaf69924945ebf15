//! Seeded synthetic data with the pathologies quantizers care about:
//! Gaussian bulk, a few channels running hot by orders of magnitude, and
//! heavy-tailed weights. Everything is deterministic given the RNG.

use crate::matrix::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard normal via Box-Muller.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| sigma * gaussian(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Gaussian bulk with `n_outliers` evenly spread columns amplified by
/// `boost`. This is the canonical activation shape: a handful of channels
/// dominating every token.
pub fn outlier_activations(
    rng: &mut ChaCha8Rng,
    tokens: usize,
    channels: usize,
    n_outliers: usize,
    boost: f64,
) -> Matrix {
    let mut m = gaussian_matrix(rng, tokens, channels, 1.0);
    if n_outliers == 0 {
        return m;
    }
    let stride = (channels / n_outliers).max(1);
    for c in (0..channels).step_by(stride).take(n_outliers) {
        for r in 0..tokens {
            m.set(r, c, m.get(r, c) * boost);
        }
    }
    m
}

/// Weights whose input channels carry systematically different magnitudes
/// (log-normal per-channel gain), mirroring the structure that makes plain
/// per-channel weight quantization lossy.
pub fn heavy_tailed_weights(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    spread: f64,
) -> Matrix {
    let gains: Vec<f64> = (0..cols).map(|_| (spread * gaussian(rng)).exp()).collect();
    let mut m = gaussian_matrix(rng, rows, cols, 0.05);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, m.get(r, c) * gains[c]);
        }
    }
    m
}

/// Per-head key samples with a couple of hot channels, the situation key
/// smoothing exists for.
pub fn outlier_keys(
    rng: &mut ChaCha8Rng,
    tokens: usize,
    head_dim: usize,
    boost: f64,
) -> Matrix {
    let mut m = gaussian_matrix(rng, tokens, head_dim, 1.0);
    let hot = [1 % head_dim, (head_dim / 2 + 3) % head_dim];
    for &c in &hot {
        for r in 0..tokens {
            m.set(r, c, m.get(r, c) * boost);
        }
    }
    m
}
