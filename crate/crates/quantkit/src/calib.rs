//! Calibration-time accuracy transformations.
//!
//! None of these change what a layer computes -- each one rescales, rotates,
//! or permutes activations while compensating exactly on the weight side.
//! Their entire purpose is to reshape value distributions so the quantizers
//! downstream lose less:
//!
//!   key smoothing      per-channel scale on K (inverse on Q), paired across
//!                      rotary dims so it commutes with position encoding
//!   rotation           multiply block input by a scaled Hadamard matrix,
//!                      spreading outlier channels across all channels
//!   output smoothing   migrate scale from activations into weights for the
//!                      modules consuming attention / FFN outputs
//!   channel reorder    group input channels of similar salience so group
//!                      scales fit their members
//!   weight clipping    grid-search a shrunken dynamic range minimizing the
//!                      layer output error

use crate::error::{Error, Result};
use crate::matrix::Matrix;

// ---------------------------------------------------------------------------
// key/query smoothing

/// Per-channel scales for one KV head, paired so lambda[i] == lambda[i+D/2].
#[derive(Debug, Clone)]
pub struct SmoothScales {
    pub lambda: Vec<f64>,
    pub alpha: f64,
}

impl SmoothScales {
    pub fn identity(d: usize) -> Self {
        SmoothScales { lambda: vec![1.0; d], alpha: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lambda.len();
        if d % 2 != 0 {
            return Err(Error::Shape(format!("head dim {d} must be even")));
        }
        for i in 0..d / 2 {
            if self.lambda[i] != self.lambda[i + d / 2] {
                return Err(Error::InvalidInput(format!(
                    "unpaired scales at channel {i}"
                )));
            }
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidInput("non-positive smoothing scale".into()));
        }
        Ok(())
    }
}

/// lambda_i = lambda_{i+D/2} = max(max|K_i|, max|K_{i+D/2}|)^alpha over the
/// calibration keys of one head (`k_samples` is tokens x D). Dead channel
/// pairs (max 0) get lambda 1.
pub fn smooth_attention_scales(k_samples: &Matrix, alpha: f64) -> Result<SmoothScales> {
    let d = k_samples.cols;
    if d % 2 != 0 {
        return Err(Error::Shape(format!("head dim {d} must be even")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0,1]")));
    }
    let mut lambda = vec![1.0; d];
    for i in 0..d / 2 {
        let m = k_samples.col_abs_max(i).max(k_samples.col_abs_max(i + d / 2));
        let l = if m > 0.0 { m.powf(alpha) } else { 1.0 };
        let l = if l.is_finite() && l > 0.0 { l } else { 1.0 };
        lambda[i] = l;
        lambda[i + d / 2] = l;
    }
    let s = SmoothScales { lambda, alpha };
    s.validate()?;
    Ok(s)
}

/// Fold the smoothing into one head's projection weights: query rows are
/// multiplied by lambda, key rows divided, leaving Q Kᵀ unchanged.
pub fn fuse_smooth_into_projections(
    w_q: &Matrix,
    w_k: &Matrix,
    s: &SmoothScales,
) -> Result<(Matrix, Matrix)> {
    let d = s.lambda.len();
    if w_q.rows != d || w_k.rows != d {
        return Err(Error::Shape(format!(
            "projection rows {}/{} vs head dim {d}",
            w_q.rows, w_k.rows
        )));
    }
    s.validate()?;
    let mut q = w_q.clone();
    let mut k = w_k.clone();
    for i in 0..d {
        for c in 0..q.cols {
            q.set(i, c, q.get(i, c) * s.lambda[i]);
        }
        for c in 0..k.cols {
            k.set(i, c, k.get(i, c) / s.lambda[i]);
        }
    }
    Ok((q, k))
}

// ---------------------------------------------------------------------------
// rotary position encoding (pairing (i, i+D/2), base 10000)

/// Rotate pairs (x_i, x_{i+D/2}) by angle position * 10000^(-2i/D).
pub fn rope(x: &[f64], position: usize) -> Result<Vec<f64>> {
    let d = x.len();
    if d % 2 != 0 {
        return Err(Error::Shape(format!("rope dim {d} must be even")));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let theta = 10000f64.powf(-2.0 * i as f64 / d as f64);
        let angle = position as f64 * theta;
        let (sin, cos) = angle.sin_cos();
        out[i] = x[i] * cos - x[i + half] * sin;
        out[i + half] = x[i] * sin + x[i + half] * cos;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// rotation

/// Orthonormal Hadamard matrix of power-of-two size: entry (i,j) is
/// (-1)^popcount(i AND j) / sqrt(n).
pub fn hadamard(n: usize) -> Result<Matrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Unsupported(format!(
            "Hadamard size {n} is not a power of two"
        )));
    }
    let norm = 1.0 / (n as f64).sqrt();
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sign = if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            h.set(i, j, sign * norm);
        }
    }
    Ok(h)
}

/// Rotate activations right by q and weights left by qᵀ: (XQ)(QᵀW) = XW.
/// `w` is stored reduction-major here (k x n).
pub fn rotate_block_input(x: &Matrix, w: &Matrix, q: &Matrix) -> Result<(Matrix, Matrix)> {
    if q.rows != q.cols || x.cols != q.rows || w.rows != q.rows {
        return Err(Error::Shape(format!(
            "rotation {}x{} vs activations {}x{} / weights {}x{}",
            q.rows, q.cols, x.rows, x.cols, w.rows, w.cols
        )));
    }
    let qt = q.transpose();
    let x_rot = x.matmul_nt(&qt)?; // X·Q
    let w_rot = w.transpose().matmul_nt(&qt)?.transpose(); // Qᵀ·W
    Ok((x_rot, w_rot))
}

// ---------------------------------------------------------------------------
// output-module smoothing

/// Scale migration for a consuming linear layer (weights out x in):
/// lambda_j = max|X_j|^alpha / max|W_.j|^(1-alpha). Activations get divided
/// by lambda at run time; the returned weights are pre-multiplied. Dead
/// channels on either side fall back to lambda 1.
pub fn smooth_output_module(
    stats: &[f64],
    w: &Matrix,
    alpha: f64,
) -> Result<(Vec<f64>, Matrix)> {
    if stats.len() != w.cols {
        return Err(Error::Shape(format!(
            "{} stats for {} input channels",
            stats.len(),
            w.cols
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0,1]")));
    }
    let mut lambda = vec![1.0; w.cols];
    for (j, l) in lambda.iter_mut().enumerate() {
        let a = stats[j];
        let b = w.col_abs_max(j);
        let cand = a.powf(alpha) / b.powf(1.0 - alpha);
        if cand.is_finite() && cand > 0.0 {
            *l = cand;
        }
    }
    let mut fused = w.clone();
    for r in 0..w.rows {
        for j in 0..w.cols {
            fused.set(r, j, fused.get(r, j) * lambda[j]);
        }
    }
    Ok((lambda, fused))
}

// ---------------------------------------------------------------------------
// channel reordering

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPermutation {
    pub perm: Vec<usize>,
}

impl ChannelPermutation {
    pub fn identity(k: usize) -> Self {
        ChannelPermutation { perm: (0..k).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.perm.len();
        let mut seen = vec![false; k];
        for &p in &self.perm {
            if p >= k || seen[p] {
                return Err(Error::InvalidInput(format!("not a permutation at {p}")));
            }
            seen[p] = true;
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        ChannelPermutation { perm: inv }
    }
}

/// Sort channels by salience (descending, ties by index), cut the ranking
/// into consecutive groups of g, and list each group's members in index
/// order. Channels of similar magnitude end up sharing a quantization group.
pub fn reorder_channels(stats: &[f64], g: usize) -> Result<ChannelPermutation> {
    let k = stats.len();
    if g == 0 || k % g != 0 {
        return Err(Error::Shape(format!("group size {g} does not divide {k}")));
    }
    let mut ranked: Vec<usize> = (0..k).collect();
    ranked.sort_by(|&a, &b| {
        stats[b].partial_cmp(&stats[a]).unwrap().then(a.cmp(&b))
    });
    let mut perm = Vec::with_capacity(k);
    for chunk in ranked.chunks(g) {
        let mut members = chunk.to_vec();
        members.sort_unstable();
        perm.extend(members);
    }
    let p = ChannelPermutation { perm };
    p.validate()?;
    Ok(p)
}

/// Permute the shared reduction dimension of both operands (columns of the
/// activations, input channels of the out x in weights).
pub fn apply_permutation(
    x: &Matrix,
    w: &Matrix,
    p: &ChannelPermutation,
) -> Result<(Matrix, Matrix)> {
    if x.cols != p.perm.len() || w.cols != p.perm.len() {
        return Err(Error::Shape(format!(
            "permutation of {} vs activations {} / weights {}",
            p.perm.len(),
            x.cols,
            w.cols
        )));
    }
    p.validate()?;
    Ok((permute_cols(x, &p.perm), permute_cols(w, &p.perm)))
}

pub fn permute_cols(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        for (t, &src) in perm.iter().enumerate() {
            out.set(r, t, m.get(r, src));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// weight clipping

/// What the grid search minimizes.
pub enum ClipObjective<'a> {
    /// Squared error of X·Ŵᵀ against X·Wᵀ over the calibration batch.
    LayerOutput,
    /// Caller-supplied forward (e.g. a small attention block); receives the
    /// candidate dequantized weight and returns its error.
    BlockOutput(&'a dyn Fn(&Matrix) -> Result<f64>),
}

/// Evenly spaced clip ratios in [0.5, 1.0], 20 points.
pub fn default_clip_grid() -> Vec<f64> {
    (0..20).map(|i| 0.5 + 0.5 * i as f64 / 19.0).collect()
}

/// Exhaustive grid search over clip ratios. `quantizer` maps (w, ratio) to a
/// quantized-dequantized candidate whose dynamic range was shrunk to
/// ratio * [min, max]. Ties go to the larger ratio.
pub fn clip_search(
    w: &Matrix,
    x_calib: &Matrix,
    objective: ClipObjective,
    quantizer: &dyn Fn(&Matrix, f64) -> Result<Matrix>,
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty clip grid".into()));
    }
    if grid.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
        return Err(Error::InvalidInput("clip ratios must lie in (0, 1]".into()));
    }
    let reference = match objective {
        ClipObjective::LayerOutput => Some(x_calib.matmul_nt(w)?),
        ClipObjective::BlockOutput(_) => None,
    };
    let mut best: Option<(f64, f64)> = None; // (ratio, err)
    for &alpha in grid {
        let w_hat = quantizer(w, alpha)?;
        let err = match &objective {
            ClipObjective::LayerOutput => {
                let out = x_calib.matmul_nt(&w_hat)?;
                reference
                    .as_ref()
                    .unwrap()
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            }
            ClipObjective::BlockOutput(f) => f(&w_hat)?,
        };
        best = match best {
            None => Some((alpha, err)),
            Some((ba, be)) => {
                if err < be || (err == be && alpha > ba) {
                    Some((alpha, err))
                } else {
                    Some((ba, be))
                }
            }
        };
    }
    Ok(best.unwrap().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{fake_quantize, Granularity, Scheme};
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-amp..amp)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
        let num: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn smoothing_formula() {
        // channel 0 peaks at 100, its rotary partner at 4 -> lambda 10
        let d = 8;
        let mut k = Matrix::zeros(3, d);
        k.set(0, 0, 100.0);
        k.set(1, 4, -4.0);
        for c in 1..4 {
            k.set(2, c, 1.0);
            k.set(2, c + 4, 1.0);
        }
        let s = smooth_attention_scales(&k, 0.5).unwrap();
        assert_eq!(s.lambda[0], 10.0);
        assert_eq!(s.lambda[4], 10.0);
        for c in 1..4 {
            assert_eq!(s.lambda[c], 1.0);
        }
    }

    #[test]
    fn all_ones_is_identity() {
        let k = Matrix::from_vec(2, 4, vec![1.0; 8]).unwrap();
        let s = smooth_attention_scales(&k, 0.5).unwrap();
        assert!(s.lambda.iter().all(|&l| l == 1.0));
    }

    #[test]
    fn zero_channels_guarded() {
        let k = Matrix::zeros(3, 6);
        let s = smooth_attention_scales(&k, 0.5).unwrap();
        assert!(s.lambda.iter().all(|&l| l == 1.0));
        assert!(smooth_attention_scales(&Matrix::zeros(2, 5), 0.5).is_err());
    }

    #[test]
    fn smoothing_tames_outlier_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let (tokens, d) = (64, 16);
        let mut k = random_matrix(&mut rng, tokens, d, 1.0);
        for r in 0..tokens {
            k.set(r, 3, k.get(r, 3) * 60.0); // one outlier channel
        }
        let s = smooth_attention_scales(&k, 0.5).unwrap();
        let smoothed = {
            let mut m = k.clone();
            for r in 0..tokens {
                for c in 0..d {
                    m.set(r, c, m.get(r, c) / s.lambda[c]);
                }
            }
            m
        };
        let ratio = |m: &Matrix| {
            let mut maxes: Vec<f64> = (0..d).map(|c| m.col_abs_max(c)).collect();
            maxes.sort_by(|a, b| a.partial_cmp(b).unwrap());
            maxes[d - 1] / maxes[d / 2]
        };
        assert!(
            ratio(&smoothed) < ratio(&k),
            "max/median channel ratio should drop"
        );
    }

    #[test]
    fn fusion_preserves_attention_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (d, hidden, tokens) = (8, 16, 5);
        let w_q = random_matrix(&mut rng, d, hidden, 1.0);
        let w_k = random_matrix(&mut rng, d, hidden, 1.0);
        let x = random_matrix(&mut rng, tokens, hidden, 1.0);
        let mut k_cal = random_matrix(&mut rng, tokens, d, 1.0);
        k_cal.set(0, 1, 50.0);
        let s = smooth_attention_scales(&k_cal, 0.5).unwrap();
        let (wq2, wk2) = fuse_smooth_into_projections(&w_q, &w_k, &s).unwrap();

        let logits = |wq: &Matrix, wk: &Matrix| {
            let q = x.matmul_nt(wq).unwrap();
            let k = x.matmul_nt(wk).unwrap();
            q.matmul_nt(&k).unwrap()
        };
        let before = logits(&w_q, &w_k);
        let after = logits(&wq2, &wk2);
        assert!(rel_frobenius(&before, &after) <= 1e-9);
    }

    #[test]
    fn rope_identity_at_origin_and_norms() {
        let x = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(rope(&x, 0).unwrap(), x);
        let y = rope(&x, 9).unwrap();
        for i in 0..2 {
            let before = x[i].hypot(x[i + 2]);
            let after = y[i].hypot(y[i + 2]);
            assert!((before - after).abs() < 1e-12);
        }
        assert!(rope(&[1.0; 3], 1).is_err());
    }

    #[test]
    fn paired_scales_commute_with_rope() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let d = 8;
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut lambda: Vec<f64> = (0..d / 2).map(|_| rng.gen_range(0.1..10.0)).collect();
            lambda.extend_from_within(..);
            let pos = rng.gen_range(0..512);
            let scaled_then_rotated =
                rope(&x.iter().zip(&lambda).map(|(a, l)| a * l).collect::<Vec<_>>(), pos)
                    .unwrap();
            let rotated_then_scaled: Vec<f64> = rope(&x, pos)
                .unwrap()
                .iter()
                .zip(&lambda)
                .map(|(a, l)| a * l)
                .collect();
            for (a, b) in scaled_then_rotated.iter().zip(&rotated_then_scaled) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn hadamard_shapes_and_orthogonality() {
        assert_eq!(hadamard(1).unwrap().get(0, 0), 1.0);
        assert!(hadamard(12).is_err());
        assert!(hadamard(0).is_err());
        let h = hadamard(4).unwrap();
        let prod = h.matmul_nt(&h).unwrap(); // H·Hᵀ
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_preserves_product_and_spreads_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (m, k, n) = (6, 16, 8);
        let mut x = random_matrix(&mut rng, m, k, 1.0);
        for r in 0..m {
            x.set(r, 5, 80.0 + rng.gen_range(0.0..5.0)); // outlier channel
        }
        let w = random_matrix(&mut rng, k, n, 1.0);
        let q = hadamard(k).unwrap();
        let (x_rot, w_rot) = rotate_block_input(&x, &w, &q).unwrap();

        let before = x.matmul_nt(&w.transpose()).unwrap();
        let after = x_rot.matmul_nt(&w_rot.transpose()).unwrap();
        assert!(rel_frobenius(&before, &after) <= 1e-9);

        let peak = |m: &Matrix| (0..m.cols).map(|c| m.col_abs_max(c)).fold(0.0, f64::max);
        assert!(peak(&x_rot) < peak(&x), "rotation should flatten the outlier");

        // identity rotation is a no-op
        let mut id = Matrix::zeros(k, k);
        for i in 0..k {
            id.set(i, i, 1.0);
        }
        let (x_id, w_id) = rotate_block_input(&x, &w, &id).unwrap();
        assert_eq!(x_id, x);
        assert_eq!(w_id, w);
    }

    #[test]
    fn output_smoothing_invariance_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (tokens, k, n) = (5, 12, 7);
        let x = random_matrix(&mut rng, tokens, k, 3.0);
        let w = random_matrix(&mut rng, n, k, 1.0);
        let stats: Vec<f64> = (0..k).map(|c| x.col_abs_max(c)).collect();

        let (lambda, fused) = smooth_output_module(&stats, &w, 0.1).unwrap();
        let mut x_div = x.clone();
        for r in 0..tokens {
            for c in 0..k {
                x_div.set(r, c, x_div.get(r, c) / lambda[c]);
            }
        }
        let before = x.matmul_nt(&w).unwrap();
        let after = x_div.matmul_nt(&fused).unwrap();
        assert!(rel_frobenius(&before, &after) <= 1e-9);

        // alpha 0: scales come purely from the weights
        let (l0, _) = smooth_output_module(&stats, &w, 0.0).unwrap();
        for j in 0..k {
            assert!((l0[j] - 1.0 / w.col_abs_max(j)).abs() < 1e-12);
        }

        // fixed point: equal magnitudes on both sides, alpha 1/2 -> lambda 1
        let stats_eq: Vec<f64> = (0..k).map(|c| w.col_abs_max(c)).collect();
        let (leq, _) = smooth_output_module(&stats_eq, &w, 0.5).unwrap();
        for l in leq {
            assert!((l - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reorder_examples() {
        let p = reorder_channels(&[1.0, 9.0, 2.0, 8.0], 2).unwrap();
        assert_eq!(p.perm, vec![1, 3, 0, 2]);
        // already sorted descending -> identity
        let p = reorder_channels(&[9.0, 8.0, 2.0, 1.0], 2).unwrap();
        assert_eq!(p.perm, vec![0, 1, 2, 3]);
        // ties broken by index
        let p = reorder_channels(&[5.0, 5.0, 5.0, 5.0], 2).unwrap();
        assert_eq!(p.perm, vec![0, 1, 2, 3]);
        assert!(reorder_channels(&[1.0; 6], 4).is_err());
    }

    #[test]
    fn permutation_roundtrip_and_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (m, k, n) = (4, 8, 6);
        let x = random_matrix(&mut rng, m, k, 1.0);
        let w = random_matrix(&mut rng, n, k, 1.0);
        let p = reorder_channels(
            &(0..k).map(|_| rng.gen_range(0.0..5.0)).collect::<Vec<_>>(),
            4,
        )
        .unwrap();
        let (xp, wp) = apply_permutation(&x, &w, &p).unwrap();
        let (x_back, w_back) = apply_permutation(&xp, &wp, &p.inverse()).unwrap();
        assert_eq!(x_back, x);
        assert_eq!(w_back, w);
        let before = x.matmul_nt(&w).unwrap();
        let after = xp.matmul_nt(&wp).unwrap();
        assert!(rel_frobenius(&before, &after) <= 1e-9);
    }

    #[test]
    fn reorder_helps_group_quantization() {
        // lognormal channel magnitudes: a random layout sprinkles the loudest
        // channels across most groups, so every group pays a coarse scale;
        // sorting by salience concentrates that cost in the top group and the
        // rest of the spectrum gets progressively finer scales
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let (n, k, g) = (8, 64, 8);
        let w = synth::heavy_tailed_weights(&mut rng, n, k, 1.5);
        let stats: Vec<f64> = (0..k).map(|c| w.col_abs_max(c)).collect();
        let p = reorder_channels(&stats, g).unwrap();
        let w_p = permute_cols(&w, &p.perm);

        let sse = |m: &Matrix| {
            let back =
                fake_quantize(m, 4, Scheme::AsymmetricUnsigned, Granularity::PerGroup(g)).unwrap();
            m.data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        assert!(sse(&w_p) <= sse(&w), "reorder should cut group error");
    }

    #[test]
    fn clip_search_basics() {
        use crate::quant::quantize_matrix_clipped;
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let quantizer = |w: &Matrix, alpha: f64| {
            Ok(quantize_matrix_clipped(
                w,
                4,
                Scheme::AsymmetricUnsigned,
                Granularity::PerChannel,
                alpha,
            )?
            .dequantize())
        };
        let grid = default_clip_grid();
        assert_eq!(grid.len(), 20);
        assert_eq!(grid[0], 0.5);
        assert_eq!(grid[19], 1.0);

        // exactly representable weights: zero error everywhere representable,
        // ties resolve to the largest ratio
        let w = Matrix::from_vec(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let x = Matrix::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        let x = {
            // calibration batch needs k columns
            let mut m = Matrix::zeros(2, 4);
            for r in 0..2 {
                for c in 0..4 {
                    m.set(r, c, x.get(r, 0) * (c as f64 + 1.0));
                }
            }
            m
        };
        let alpha = clip_search(&w, &x, ClipObjective::LayerOutput, &quantizer, &grid).unwrap();
        assert_eq!(alpha, 1.0);

        // paired outliers on channels the data barely excites: shrinking the
        // range costs almost nothing there and buys resolution everywhere
        // else (paired so the row range still straddles zero after clipping;
        // 8x sigma keeps the clipped scale fine enough to resolve the bulk)
        let mut w = random_matrix(&mut rng, 1, 64, 1.0);
        w.set(0, 17, 8.0);
        w.set(0, 41, -8.0);
        let mut x = random_matrix(&mut rng, 16, 64, 1.0);
        for r in 0..16 {
            x.set(r, 17, x.get(r, 17) * 0.001);
            x.set(r, 41, x.get(r, 41) * 0.001);
        }
        let err_at = |alpha: f64| {
            let w_hat = quantizer(&w, alpha).unwrap();
            let a = x.matmul_nt(&w).unwrap();
            let b = x.matmul_nt(&w_hat).unwrap();
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
        };
        let alpha = clip_search(&w, &x, ClipObjective::LayerOutput, &quantizer, &grid).unwrap();
        assert!(alpha < 1.0);
        assert!(err_at(alpha) <= err_at(1.0));

        assert!(clip_search(&w, &x, ClipObjective::LayerOutput, &quantizer, &[]).is_err());
    }
}
