//! End-to-end quantization of a toy transformer block.
//!
//! The block is the smallest structure with every tension the full recipe
//! resolves: grouped-query attention with a rotary cache (key smoothing and
//! low-bit KV), four linear layers (weight quantization, rotation, channel
//! reorder, clipping), residuals and normalizations (per-token activation
//! quantization). `apply_qoq` runs the stages in a fixed order with
//! recalibration between them, `evaluate_fidelity` compares the quantized
//! forward against the float reference layer by layer.
//!
//! Stage order: rotate -> output smoothing -> attention smoothing (fused
//! into the projections) -> channel reorder -> clip search -> weight
//! quantization. Every transform is an exact invariance of the float
//! forward; only the final quantization loses information.

use crate::calib::{
    clip_search, default_clip_grid, hadamard, permute_cols, reorder_channels, rope,
    smooth_attention_scales, smooth_output_module, ChannelPermutation, ClipObjective,
    SmoothScales,
};
use crate::error::{Error, Result};
use crate::exec::{
    gemm_w4a8_per_channel, gemm_w4a8_per_group, pack_weight_tiles, precompute_token_sums,
    PackedTile, PerChannelWeight,
};
use crate::kv::{attention_decode, attention_reference, KvBits, KvPageStore, DEFAULT_PAGE_SIZE};
use crate::matrix::Matrix;
use crate::progressive::{quantize_progressive_clipped, ProgressiveWeight};
use crate::quant::{quantize_matrix, quantize_matrix_clipped, Granularity, Scheme};
use crate::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// the float block

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub ffn_mult: usize,
}

impl BlockDims {
    /// H=4, H_kv=2, D=16, hidden=64, FFN 4x.
    pub fn toy() -> Self {
        BlockDims { heads: 4, kv_heads: 2, head_dim: 16, hidden: 64, ffn_mult: 4 }
    }

    /// hidden=256 variant for group sizes that need several groups per row.
    pub fn toy_wide() -> Self {
        BlockDims { heads: 4, kv_heads: 2, head_dim: 64, hidden: 256, ffn_mult: 2 }
    }

    pub fn ffn(&self) -> usize {
        self.ffn_mult * self.hidden
    }

    pub fn qkv_rows(&self) -> usize {
        (self.heads + 2 * self.kv_heads) * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0
            || self.kv_heads == 0
            || self.heads % self.kv_heads != 0
            || self.head_dim % 2 != 0
            || self.hidden != self.heads * self.head_dim
            || self.ffn_mult == 0
        {
            return Err(Error::InvalidConfig(format!("bad block dims {self:?}")));
        }
        Ok(())
    }
}

/// Pre-norm transformer block: attention with RoPE and GQA, then a SiLU FFN,
/// both behind residual connections.
#[derive(Debug, Clone)]
pub struct ToyBlock {
    pub dims: BlockDims,
    /// (H + 2*H_kv)*D x hidden; rows are Q heads, then K heads, then V heads.
    pub w_qkv: Matrix,
    /// hidden x H*D
    pub w_o: Matrix,
    /// ffn x hidden
    pub w_ffn1: Matrix,
    /// hidden x ffn
    pub w_ffn2: Matrix,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

impl ToyBlock {
    pub fn random(dims: BlockDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let init = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let sigma = 1.0 / (cols as f64).sqrt();
            synth::gaussian_matrix(rng, rows, cols, sigma)
        };
        let h = dims.hidden;
        Ok(ToyBlock {
            dims,
            w_qkv: init(rng, dims.qkv_rows(), h),
            w_o: init(rng, h, dims.heads * dims.head_dim),
            w_ffn1: init(rng, dims.ffn(), h),
            w_ffn2: init(rng, h, dims.ffn()),
            ln1_gamma: (0..h).map(|_| 1.0 + 0.05 * synth::gaussian(rng)).collect(),
            ln1_beta: (0..h).map(|_| 0.05 * synth::gaussian(rng)).collect(),
            ln2_gamma: (0..h).map(|_| 1.0 + 0.05 * synth::gaussian(rng)).collect(),
            ln2_beta: (0..h).map(|_| 0.05 * synth::gaussian(rng)).collect(),
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.out)
    }

    pub fn forward_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        WorkingModel::from_block(self).forward(x, &ActPath::Float)
    }
}

fn layernorm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (c, &v) in row.iter().enumerate() {
            out.set(r, c, (v - mean) * inv * gamma[c] + beta[c]);
        }
    }
    out
}

fn silu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v /= 1.0 + (-*v).exp();
    }
    out
}

// ---------------------------------------------------------------------------
// recipes

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightMode {
    /// Keep weights in full precision.
    None,
    /// Asymmetric u4, one (scale, zero) per output channel.
    PerChannelU4,
    /// Two-level progressive scheme with the given group size.
    ProgressiveGroup(usize),
}

#[derive(Debug, Clone)]
pub struct QuantRecipe {
    pub weight_mode: WeightMode,
    /// Per-token symmetric int8 activation quantization at every linear input.
    pub act8: bool,
    pub kv_bits: Option<KvBits>,
    pub kv_page: usize,
    pub rotate: bool,
    pub smooth_attention: Option<f64>,
    pub output_smooth: Option<f64>,
    pub reorder: bool,
    /// Group size used by reorder (and by ProgressiveGroup quantization).
    pub group: usize,
    pub clip_grid: Option<Vec<f64>>,
}

impl QuantRecipe {
    /// Everything off: the identity pipeline.
    pub fn identity() -> Self {
        QuantRecipe {
            weight_mode: WeightMode::None,
            act8: false,
            kv_bits: None,
            kv_page: DEFAULT_PAGE_SIZE,
            rotate: false,
            smooth_attention: None,
            output_smooth: None,
            reorder: false,
            group: 64,
            clip_grid: None,
        }
    }

    /// Round-to-nearest W4A8KV4 with no accuracy optimizations.
    pub fn rtn_baseline() -> Self {
        QuantRecipe {
            weight_mode: WeightMode::PerChannelU4,
            act8: true,
            kv_bits: Some(KvBits::Four),
            ..QuantRecipe::identity()
        }
    }

    /// The full recipe: every stage on, progressive group weights.
    pub fn full(group: usize) -> Self {
        QuantRecipe {
            weight_mode: WeightMode::ProgressiveGroup(group),
            act8: true,
            kv_bits: Some(KvBits::Four),
            rotate: true,
            smooth_attention: Some(0.5),
            output_smooth: Some(0.1),
            reorder: true,
            group,
            clip_grid: Some(default_clip_grid()),
            ..QuantRecipe::identity()
        }
    }
}

// ---------------------------------------------------------------------------
// calibration

/// Per-channel max-absolute statistics at every linear input, plus the
/// post-rotary keys of each KV head, with the calibration batch kept for
/// the stages that need to replay it.
#[derive(Debug, Clone)]
pub struct CalibStats {
    pub x_calib: Matrix,
    /// Indexed qkv, o, ffn1, ffn2; one entry per input channel.
    pub input_absmax: [Vec<f64>; 4],
    /// Per kv head, per channel.
    pub key_absmax: Vec<Vec<f64>>,
}

/// Run the float block over the calibration batch and record activation
/// statistics at each linear input.
pub fn calibrate(block: &ToyBlock, x_calib: &Matrix) -> Result<CalibStats> {
    let trace = block.forward_trace(x_calib)?;
    Ok(stats_from_trace(x_calib, &trace))
}

fn stats_from_trace(x_calib: &Matrix, trace: &ForwardTrace) -> CalibStats {
    let colmax = |m: &Matrix| (0..m.cols).map(|c| m.col_abs_max(c)).collect::<Vec<_>>();
    CalibStats {
        x_calib: x_calib.clone(),
        input_absmax: [
            colmax(&trace.inputs[0]),
            colmax(&trace.inputs[1]),
            colmax(&trace.inputs[2]),
            colmax(&trace.inputs[3]),
        ],
        key_absmax: trace.keys.iter().map(colmax).collect(),
    }
}

// ---------------------------------------------------------------------------
// working model: float weights plus accumulated transforms

const QKV: usize = 0;
const OPROJ: usize = 1;
const FFN1: usize = 2;
const FFN2: usize = 3;
pub(crate) const LINEAR_NAMES: [&str; 4] = ["qkv", "o_proj", "ffn1", "ffn2"];

#[derive(Debug, Clone)]
pub(crate) struct LinearState {
    /// Current weight, out x in, with every accepted transform folded in.
    pub(crate) w: Matrix,
    pub(crate) rotation: Option<Matrix>,
    pub(crate) smooth: Option<Vec<f64>>,
    pub(crate) perm: Option<ChannelPermutation>,
    pub(crate) clip: f64,
}

impl LinearState {
    fn new(w: Matrix) -> Self {
        LinearState { w, rotation: None, smooth: None, perm: None, clip: 1.0 }
    }

    /// Replay the activation-side transforms in fold order.
    fn transform_input(&self, x: &Matrix) -> Result<Matrix> {
        let mut x = x.clone();
        if let Some(q) = &self.rotation {
            x = x.matmul_nt(&q.transpose())?; // X * Q
        }
        if let Some(lambda) = &self.smooth {
            for r in 0..x.rows {
                for (c, l) in lambda.iter().enumerate() {
                    x.set(r, c, x.get(r, c) / l);
                }
            }
        }
        if let Some(p) = &self.perm {
            x = permute_cols(&x, &p.perm);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct WorkingModel {
    pub(crate) dims: BlockDims,
    pub(crate) linears: [LinearState; 4],
    pub(crate) ln1_gamma: Vec<f64>,
    pub(crate) ln1_beta: Vec<f64>,
    pub(crate) ln2_gamma: Vec<f64>,
    pub(crate) ln2_beta: Vec<f64>,
    /// Fused key-smoothing scales per kv head (kept for reporting; the
    /// weights already carry them).
    pub(crate) smooth_attn: Option<Vec<SmoothScales>>,
}

/// How the forward treats activations and weights.
enum ActPath<'a> {
    /// Full precision with the current (transformed) float weights.
    Float,
    /// Quantized execution against finished weights.
    Quantized { weights: &'a [QuantWeight; 4], act8: bool, kv: Option<(KvBits, usize)> },
}

/// Captured intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub qkv_out: Matrix,
    pub attn_out: Matrix,
    pub ffn_out: Matrix,
    pub out: Matrix,
    /// Transformed inputs actually seen by each linear (calibration view).
    pub(crate) inputs: [Matrix; 4],
    /// Post-rotary keys per kv head, tokens x D.
    pub(crate) keys: Vec<Matrix>,
}

impl WorkingModel {
    fn from_block(block: &ToyBlock) -> Self {
        WorkingModel {
            dims: block.dims,
            linears: [
                LinearState::new(block.w_qkv.clone()),
                LinearState::new(block.w_o.clone()),
                LinearState::new(block.w_ffn1.clone()),
                LinearState::new(block.w_ffn2.clone()),
            ],
            ln1_gamma: block.ln1_gamma.clone(),
            ln1_beta: block.ln1_beta.clone(),
            ln2_gamma: block.ln2_gamma.clone(),
            ln2_beta: block.ln2_beta.clone(),
            smooth_attn: None,
        }
    }

    fn apply_linear(
        &self,
        idx: usize,
        x: &Matrix,
        path: &ActPath,
    ) -> Result<(Matrix, Matrix)> {
        let ls = &self.linears[idx];
        let xt = ls.transform_input(x)?;
        let out = match path {
            ActPath::Float => xt.matmul_nt(&ls.w)?,
            ActPath::Quantized { weights, act8, .. } => {
                if *act8 {
                    let qx = quantize_matrix(
                        &xt,
                        8,
                        Scheme::SymmetricSigned,
                        Granularity::PerChannel,
                    )?;
                    match &weights[idx] {
                        QuantWeight::Float(w) => qx.dequantize().matmul_nt(w)?,
                        QuantWeight::PerChannel(pcw) => {
                            let sums = precompute_token_sums(&qx)?;
                            gemm_w4a8_per_channel(&qx, pcw, &sums)?
                        }
                        QuantWeight::Group { pw, tiles } => {
                            gemm_w4a8_per_group(&qx, pw, tiles)?
                        }
                    }
                } else {
                    match &weights[idx] {
                        QuantWeight::Float(w) => xt.matmul_nt(w)?,
                        QuantWeight::PerChannel(pcw) => xt.matmul_nt(&pcw.dequantize())?,
                        QuantWeight::Group { pw, .. } => xt.matmul_nt(&pw.dequantize()?)?,
                    }
                }
            }
        };
        Ok((out, xt))
    }

    /// The one forward implementation everything shares: float calibration
    /// passes, the float reference, and quantized execution.
    fn forward(&self, x: &Matrix, path: &ActPath) -> Result<ForwardTrace> {
        let d = &self.dims;
        if x.cols != d.hidden {
            return Err(Error::Shape(format!(
                "input {}x{} vs hidden {}",
                x.rows, x.cols, d.hidden
            )));
        }
        if x.rows == 0 {
            return Err(Error::Shape("empty token batch".into()));
        }
        let tokens = x.rows;
        let (nh, nkv, hd) = (d.heads, d.kv_heads, d.head_dim);

        let h1 = layernorm(x, &self.ln1_gamma, &self.ln1_beta);
        let (qkv_out, qkv_in) = self.apply_linear(QKV, &h1, path)?;

        // split heads and apply the rotary encoding positionally
        let mut q_rot = vec![vec![vec![0.0; hd]; nh]; tokens];
        let mut k_rot = vec![vec![vec![0.0; hd]; nkv]; tokens];
        let mut v_raw = vec![vec![vec![0.0; hd]; nkv]; tokens];
        for t in 0..tokens {
            let row = qkv_out.row(t);
            for h in 0..nh {
                q_rot[t][h] = rope(&row[h * hd..(h + 1) * hd], t)?;
            }
            for h in 0..nkv {
                let base = nh * hd + h * hd;
                k_rot[t][h] = rope(&row[base..base + hd], t)?;
                let base = (nh + nkv) * hd + h * hd;
                v_raw[t][h] = row[base..base + hd].to_vec();
            }
        }
        let keys: Vec<Matrix> = (0..nkv)
            .map(|h| {
                let mut m = Matrix::zeros(tokens, hd);
                for t in 0..tokens {
                    for c in 0..hd {
                        m.set(t, c, k_rot[t][h][c]);
                    }
                }
                m
            })
            .collect();

        // causal attention, optionally through the quantized cache
        let kv_mode = match path {
            ActPath::Quantized { kv, .. } => *kv,
            ActPath::Float => None,
        };
        let attn_cat = match kv_mode {
            None => {
                let group = nh / nkv;
                let mut cat = Matrix::zeros(tokens, nh * hd);
                for t in 0..tokens {
                    for h in 0..nh
                    {
                        let kvh = h / group;
                        let ks: Vec<Vec<f64>> =
                            (0..=t).map(|u| k_rot[u][kvh].clone()).collect();
                        let vs: Vec<Vec<f64>> =
                            (0..=t).map(|u| v_raw[u][kvh].clone()).collect();
                        let o = attention_reference(&q_rot[t][h], &ks, &vs);
                        for (c, val) in o.iter().enumerate() {
                            cat.set(t, h * hd + c, *val);
                        }
                    }
                }
                cat
            }
            Some((bits, page)) => {
                let mut store = KvPageStore::new(nkv, hd, page, bits)?;
                let mut cat = Matrix::zeros(tokens, nh * hd);
                for t in 0..tokens {
                    let mut k_t = Matrix::zeros(nkv, hd);
                    let mut v_t = Matrix::zeros(nkv, hd);
                    for h in 0..nkv {
                        for c in 0..hd {
                            k_t.set(h, c, k_rot[t][h][c]);
                            v_t.set(h, c, v_raw[t][h][c]);
                        }
                    }
                    store.append_token(&k_t, &v_t)?;
                    let mut q_t = Matrix::zeros(nh, hd);
                    for h in 0..nh {
                        for c in 0..hd {
                            q_t.set(h, c, q_rot[t][h][c]);
                        }
                    }
                    // smoothing is already fused into the projections, so the
                    // decode gets no extra scales
                    let o = attention_decode(&store, &q_t, None)?;
                    for h in 0..nh {
                        for c in 0..hd {
                            cat.set(t, h * hd + c, o.get(h, c));
                        }
                    }
                }
                cat
            }
        };

        let (attn_out, o_in) = self.apply_linear(OPROJ, &attn_cat, path)?;
        let x2 = add(x, &attn_out)?;
        let h2 = layernorm(&x2, &self.ln2_gamma, &self.ln2_beta);
        let (f1, ffn1_in) = self.apply_linear(FFN1, &h2, path)?;
        let f1_act = silu(&f1);
        let (ffn_out, ffn2_in) = self.apply_linear(FFN2, &f1_act, path)?;
        let out = add(&x2, &ffn_out)?;

        Ok(ForwardTrace {
            qkv_out,
            attn_out,
            ffn_out,
            out,
            inputs: [qkv_in, o_in, ffn1_in, ffn2_in],
            keys,
        })
    }
}

fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Shape("residual shape mismatch".into()));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// quantized block

#[derive(Debug, Clone)]
pub(crate) enum QuantWeight {
    Float(Matrix),
    PerChannel(PerChannelWeight),
    Group { pw: ProgressiveWeight, tiles: Vec<PackedTile> },
}

/// A block after `apply_qoq`: transform metadata plus quantized weights.
/// Its forward uses the fused integer GEMMs and the paged KV cache.
#[derive(Debug, Clone)]
pub struct QuantizedBlock {
    pub(crate) model: WorkingModel,
    pub(crate) weights: [QuantWeight; 4],
    pub(crate) act8: bool,
    pub(crate) kv: Option<(KvBits, usize)>,
    pub recipe_summary: String,
}

impl QuantizedBlock {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.out)
    }

    pub fn forward_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        self.model.forward(
            x,
            &ActPath::Quantized { weights: &self.weights, act8: self.act8, kv: self.kv },
        )
    }

    pub fn clip_ratios(&self) -> [f64; 4] {
        [
            self.model.linears[0].clip,
            self.model.linears[1].clip,
            self.model.linears[2].clip,
            self.model.linears[3].clip,
        ]
    }

    pub fn smooth_attention_scales(&self) -> Option<&[SmoothScales]> {
        self.model.smooth_attn.as_deref()
    }
}

// ---------------------------------------------------------------------------
// the staged pipeline

/// Apply the full recipe to a calibrated block. Stages run in a fixed order
/// with a recalibration pass after each one, since every transform changes
/// the statistics the next stage consumes.
pub fn apply_qoq(
    block: &ToyBlock,
    recipe: &QuantRecipe,
    stats: &CalibStats,
) -> Result<QuantizedBlock> {
    validate_recipe(block, recipe)?;
    let x_calib = &stats.x_calib;
    let mut model = WorkingModel::from_block(block);
    let mut trace = model.forward(x_calib, &ActPath::Float)?;

    // rotation: spread outlier channels across the whole reduction dim
    if recipe.rotate {
        for idx in 0..4 {
            let k = model.linears[idx].w.cols;
            let q = hadamard(k)?;
            // weights fold Q on the input side: x'=xQ, w'=wQ keeps x'w'^T = xw^T
            model.linears[idx].w = model.linears[idx].w.matmul_nt(&q.transpose())?;
            model.linears[idx].rotation = Some(q);
        }
        trace = model.forward(x_calib, &ActPath::Float)?;
    }

    // output smoothing: migrate activation scale into the consuming weights
    if let Some(alpha) = recipe.output_smooth {
        for idx in [OPROJ, FFN2] {
            let stats_in: Vec<f64> = (0..trace.inputs[idx].cols)
                .map(|c| trace.inputs[idx].col_abs_max(c))
                .collect();
            let (lambda, fused) = smooth_output_module(&stats_in, &model.linears[idx].w, alpha)?;
            model.linears[idx].w = fused;
            // runtime divides after rotation; folding is associative because
            // the smoothing is expressed in the rotated channel space
            model.linears[idx].smooth = Some(lambda);
        }
        trace = model.forward(x_calib, &ActPath::Float)?;
    }

    // attention smoothing: per-kv-head key scales fused into the projections
    if let Some(alpha) = recipe.smooth_attention {
        let d = &block.dims;
        let r = d.heads / d.kv_heads;
        let mut all = Vec::with_capacity(d.kv_heads);
        for j in 0..d.kv_heads {
            let s = smooth_attention_scales(&trace.keys[j], alpha)?;
            let w = &mut model.linears[QKV].w;
            for (i, &l) in s.lambda.iter().enumerate() {
                for h in j * r..(j + 1) * r {
                    let row = h * d.head_dim + i;
                    for c in 0..w.cols {
                        w.set(row, c, w.get(row, c) * l);
                    }
                }
                let row = (d.heads + j) * d.head_dim + i;
                for c in 0..w.cols {
                    w.set(row, c, w.get(row, c) / l);
                }
            }
            all.push(s);
        }
        model.smooth_attn = Some(all);
        trace = model.forward(x_calib, &ActPath::Float)?;
    }

    // channel reorder: group input channels of similar salience
    if recipe.reorder {
        for idx in 0..4 {
            let stats_in: Vec<f64> = (0..trace.inputs[idx].cols)
                .map(|c| trace.inputs[idx].col_abs_max(c))
                .collect();
            let p = reorder_channels(&stats_in, recipe.group)?;
            model.linears[idx].w = permute_cols(&model.linears[idx].w, &p.perm);
            model.linears[idx].perm = Some(p);
        }
        trace = model.forward(x_calib, &ActPath::Float)?;
    }

    // clip search: per-layer dynamic-range shrink against the layer output
    if let (Some(grid), false) = (&recipe.clip_grid, recipe.weight_mode == WeightMode::None) {
        for idx in 0..4 {
            let quantizer = quantizer_for(&recipe.weight_mode);
            let alpha = clip_search(
                &model.linears[idx].w,
                &trace.inputs[idx],
                ClipObjective::LayerOutput,
                &quantizer,
                grid,
            )?;
            model.linears[idx].clip = alpha;
        }
    }

    // final weight quantization
    let weights = build_weights(&model, &recipe.weight_mode)?;

    Ok(QuantizedBlock {
        model,
        weights,
        act8: recipe.act8,
        kv: recipe.kv_bits.map(|b| (b, recipe.kv_page)),
        recipe_summary: summarize(recipe),
    })
}

fn validate_recipe(block: &ToyBlock, recipe: &QuantRecipe) -> Result<()> {
    block.dims.validate()?;
    if recipe.kv_page == 0 {
        return Err(Error::InvalidConfig("kv page size 0".into()));
    }
    if recipe.group == 0 {
        return Err(Error::InvalidConfig("group size 0".into()));
    }
    if let WeightMode::ProgressiveGroup(g) = recipe.weight_mode {
        if g != recipe.group {
            return Err(Error::InvalidConfig(format!(
                "weight group {g} vs recipe group {}",
                recipe.group
            )));
        }
    }
    Ok(())
}

fn quantizer_for(mode: &WeightMode) -> Box<dyn Fn(&Matrix, f64) -> Result<Matrix>> {
    match mode {
        WeightMode::None => Box::new(|w: &Matrix, _| Ok(w.clone())),
        WeightMode::PerChannelU4 => Box::new(|w: &Matrix, clip: f64| {
            Ok(quantize_matrix_clipped(
                w,
                4,
                Scheme::AsymmetricUnsigned,
                Granularity::PerChannel,
                clip,
            )?
            .dequantize())
        }),
        WeightMode::ProgressiveGroup(g) => {
            let g = *g;
            Box::new(move |w: &Matrix, clip: f64| {
                quantize_progressive_clipped(w, g, clip)?.dequantize()
            })
        }
    }
}

fn build_weights(model: &WorkingModel, mode: &WeightMode) -> Result<[QuantWeight; 4]> {
    let mut out = Vec::with_capacity(4);
    for ls in &model.linears {
        out.push(match mode {
            WeightMode::None => QuantWeight::Float(ls.w.clone()),
            WeightMode::PerChannelU4 => {
                let qw = quantize_matrix_clipped(
                    &ls.w,
                    4,
                    Scheme::AsymmetricUnsigned,
                    Granularity::PerChannel,
                    ls.clip,
                )?;
                QuantWeight::PerChannel(PerChannelWeight::from_quantized(&qw)?)
            }
            WeightMode::ProgressiveGroup(g) => {
                let pw = quantize_progressive_clipped(&ls.w, *g, ls.clip)?;
                let tiles = pack_weight_tiles(&pw)?;
                QuantWeight::Group { pw, tiles }
            }
        });
    }
    Ok(out.try_into().map_err(|_| Error::InvalidInput("weight build".into()))?)
}

fn summarize(recipe: &QuantRecipe) -> String {
    let weight = match &recipe.weight_mode {
        WeightMode::None => "w16".to_string(),
        WeightMode::PerChannelU4 => "w4-per-channel".to_string(),
        WeightMode::ProgressiveGroup(g) => format!("w4-progressive-g{g}"),
    };
    let kv = match recipe.kv_bits {
        None => "kv16".to_string(),
        Some(KvBits::Four) => "kv4".to_string(),
        Some(KvBits::Eight) => "kv8".to_string(),
    };
    format!(
        "{weight} a{} {kv} rotate={} smooth_attn={:?} output_smooth={:?} reorder={} clip={}",
        if recipe.act8 { 8 } else { 16 },
        recipe.rotate,
        recipe.smooth_attention,
        recipe.output_smooth,
        recipe.reorder,
        recipe.clip_grid.is_some(),
    )
}

// ---------------------------------------------------------------------------
// fidelity evaluation

#[derive(Debug, Clone)]
pub struct LayerFidelity {
    pub name: String,
    pub mse: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct FidelityReport {
    pub layers: Vec<LayerFidelity>,
    pub end_to_end: LayerFidelity,
}

impl FidelityReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            s.push_str(&format!(
                "{:<10} mse {:.6e}  max {:.6e}\n",
                l.name, l.mse, l.max_abs_err
            ));
        }
        s.push_str(&format!(
            "{:<10} mse {:.6e}  max {:.6e}\n",
            self.end_to_end.name, self.end_to_end.mse, self.end_to_end.max_abs_err
        ));
        s
    }
}

fn fidelity_of(name: &str, reference: &Matrix, got: &Matrix) -> Result<LayerFidelity> {
    let mse = reference.mse(got)?;
    let max = reference
        .data()
        .iter()
        .zip(got.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(LayerFidelity { name: name.to_string(), mse, max_abs_err: max })
}

/// Run both blocks on the same inputs and compare layer by layer.
pub fn evaluate_fidelity(
    block: &ToyBlock,
    qblock: &QuantizedBlock,
    x_eval: &Matrix,
) -> Result<FidelityReport> {
    let reference = block.forward_trace(x_eval)?;
    let got = qblock.forward_trace(x_eval)?;
    let layers = vec![
        fidelity_of("qkv_out", &reference.qkv_out, &got.qkv_out)?,
        fidelity_of("attn_out", &reference.attn_out, &got.attn_out)?,
        fidelity_of("ffn_out", &reference.ffn_out, &got.ffn_out)?,
    ];
    let end_to_end = fidelity_of("block_out", &reference.out, &got.out)?;
    Ok(FidelityReport { layers, end_to_end })
}

// ---------------------------------------------------------------------------
// crafted benchmark data

/// One entry of the heavy-tailed benchmark suite: a block with hot weight
/// input-channels and outlier key channels, plus calibration and evaluation
/// batches with their own hot activation channels. Everything the recipe's
/// stages exist to fix, in one package.
pub fn crafted_suite_entry(
    seed: u64,
    dims: BlockDims,
) -> Result<(ToyBlock, Matrix, Matrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = ToyBlock::random(dims, &mut rng)?;

    // heavy-tailed input-channel gains on every weight
    for w in [&mut block.w_qkv, &mut block.w_o, &mut block.w_ffn1, &mut block.w_ffn2] {
        let gains: Vec<f64> = (0..w.cols)
            .map(|_| (0.8 * synth::gaussian(&mut rng)).exp())
            .collect();
        for r in 0..w.rows {
            for c in 0..w.cols {
                w.set(r, c, w.get(r, c) * gains[c]);
            }
        }
    }

    // a couple of hot key channels per kv head (output rows of the K slice)
    let d = &dims;
    for j in 0..d.kv_heads {
        for ch in [3 % d.head_dim, (d.head_dim / 2 + 1) % d.head_dim] {
            let row = (d.heads + j) * d.head_dim + ch;
            for c in 0..block.w_qkv.cols {
                block.w_qkv.set(row, c, block.w_qkv.get(row, c) * 6.0);
            }
        }
    }

    // damp q/k projections so logits stay in a regime where softmax is
    // discriminative but not saturated; the heavy-tailed gains above would
    // otherwise push scores past +-30 and make attention an argmax lottery
    let qk_rows = (d.heads + d.kv_heads) * d.head_dim;
    for r in 0..qk_rows {
        for c in 0..block.w_qkv.cols {
            block.w_qkv.set(r, c, block.w_qkv.get(r, c) * 0.5);
        }
    }

    let x_calib = synth::outlier_activations(&mut rng, 24, d.hidden, 3, 8.0);
    let x_eval = synth::outlier_activations(&mut rng, 16, d.hidden, 3, 8.0);
    Ok((block, x_calib, x_eval))
}
