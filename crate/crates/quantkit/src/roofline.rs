//! Roofline model for quantized decode workloads.
//!
//! Attainable throughput is min(peak compute, bandwidth * arithmetic
//! intensity). During decoding a weight matrix is read once per token, so a
//! GEMM's intensity is set almost entirely by the weight width: halving the
//! weight bits doubles the ops extracted per byte. The model answers two
//! questions -- where different precision configs cross over as the batch
//! grows, and whether attention over a low-bit KV cache lands compute- or
//! memory-bound given the dequantization cost per element.

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// hardware description

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComputeKind {
    Fp16Tensor,
    Int8Tensor,
    Int4Tensor,
    Fp32Cuda,
}

impl ComputeKind {
    pub fn key(self) -> &'static str {
        match self {
            ComputeKind::Fp16Tensor => "fp16",
            ComputeKind::Int8Tensor => "int8",
            ComputeKind::Int4Tensor => "int4",
            ComputeKind::Fp32Cuda => "fp32_cuda",
        }
    }

    const ALL: [ComputeKind; 4] = [
        ComputeKind::Fp16Tensor,
        ComputeKind::Int8Tensor,
        ComputeKind::Int4Tensor,
        ComputeKind::Fp32Cuda,
    ];
}

/// Peak throughputs (ops/s) per compute kind plus memory bandwidth (B/s).
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareSpec {
    pub name: String,
    peaks: [f64; 4],
    pub mem_bandwidth: f64,
}

impl HardwareSpec {
    pub fn new(name: &str, fp16: f64, int8: f64, int4: f64, fp32_cuda: f64, bw: f64) -> Result<Self> {
        let hw = HardwareSpec {
            name: name.to_string(),
            peaks: [fp16, int8, int4, fp32_cuda],
            mem_bandwidth: bw,
        };
        hw.validate()?;
        Ok(hw)
    }

    /// Datacenter accelerator preset: 312/624/1248 TOPS tensor-core
    /// fp16/int8/int4, 19.6 TFLOPS general-purpose fp32, 2 TB/s memory.
    pub fn a100() -> Self {
        HardwareSpec::new("A100", 312e12, 624e12, 1248e12, 19.6e12, 2e12).unwrap()
    }

    pub fn peak(&self, kind: ComputeKind) -> f64 {
        self.peaks[ComputeKind::ALL.iter().position(|&k| k == kind).unwrap()]
    }

    fn validate(&self) -> Result<()> {
        if self.peaks.iter().any(|&p| !(p.is_finite() && p > 0.0))
            || !(self.mem_bandwidth.is_finite() && self.mem_bandwidth > 0.0)
        {
            return Err(Error::InvalidConfig("peaks and bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Parse the plain-text config format written by `to_config_string`:
    /// one `key value` pair per line, `#` comments, all keys required.
    ///
    /// ```text
    /// name A100
    /// bandwidth 2e12
    /// peak fp16 312e12
    /// ...
    /// ```
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut name = None;
        let mut bw = None;
        let mut peaks = [None; 4];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let bad = |what: &str| {
                Error::InvalidConfig(format!("line {}: {what}: {raw:?}", lineno + 1))
            };
            match parts.next() {
                Some("name") => {
                    name = Some(parts.next().ok_or_else(|| bad("missing name"))?.to_string());
                }
                Some("bandwidth") => {
                    let v = parts.next().ok_or_else(|| bad("missing value"))?;
                    bw = Some(v.parse::<f64>().map_err(|_| bad("bad number"))?);
                }
                Some("peak") => {
                    let kind_key = parts.next().ok_or_else(|| bad("missing compute kind"))?;
                    let kind = ComputeKind::ALL
                        .iter()
                        .position(|k| k.key() == kind_key)
                        .ok_or_else(|| bad("unknown compute kind"))?;
                    let v = parts.next().ok_or_else(|| bad("missing value"))?;
                    peaks[kind] = Some(v.parse::<f64>().map_err(|_| bad("bad number"))?);
                }
                Some(_) => return Err(bad("unknown key")),
                None => unreachable!(),
            }
            if parts.next().is_some() {
                return Err(bad("trailing tokens"));
            }
        }
        let missing = |what: &str| Error::InvalidConfig(format!("missing {what}"));
        let hw = HardwareSpec {
            name: name.ok_or_else(|| missing("name"))?,
            peaks: [
                peaks[0].ok_or_else(|| missing("peak fp16"))?,
                peaks[1].ok_or_else(|| missing("peak int8"))?,
                peaks[2].ok_or_else(|| missing("peak int4"))?,
                peaks[3].ok_or_else(|| missing("peak fp32_cuda"))?,
            ],
            mem_bandwidth: bw.ok_or_else(|| missing("bandwidth"))?,
        };
        hw.validate()?;
        Ok(hw)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("name {}\n", self.name));
        s.push_str(&format!("bandwidth {:e}\n", self.mem_bandwidth));
        for kind in ComputeKind::ALL {
            s.push_str(&format!("peak {} {:e}\n", kind.key(), self.peak(kind)));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// precision configurations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrecisionConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub kv_bits: u32,
}

impl PrecisionConfig {
    pub fn new(weight_bits: u32, act_bits: u32, kv_bits: u32) -> Result<Self> {
        let cfg = PrecisionConfig { weight_bits, act_bits, kv_bits };
        cfg.compute_kind()?;
        if ![4, 8, 16].contains(&weight_bits) || ![4, 8, 16].contains(&kv_bits) {
            return Err(Error::InvalidConfig(format!(
                "unsupported widths W{weight_bits}/KV{kv_bits}"
            )));
        }
        Ok(cfg)
    }

    pub fn w4a16() -> Self {
        PrecisionConfig { weight_bits: 4, act_bits: 16, kv_bits: 16 }
    }

    pub fn w8a8() -> Self {
        PrecisionConfig { weight_bits: 8, act_bits: 8, kv_bits: 8 }
    }

    pub fn w4a8kv4() -> Self {
        PrecisionConfig { weight_bits: 4, act_bits: 8, kv_bits: 4 }
    }

    pub fn w4a4() -> Self {
        PrecisionConfig { weight_bits: 4, act_bits: 4, kv_bits: 4 }
    }

    /// GEMMs run on the unit matching the activation width: fp16 tensor
    /// cores for A16, int8 for A8, int4 for A4.
    pub fn compute_kind(&self) -> Result<ComputeKind> {
        match self.act_bits {
            16 => Ok(ComputeKind::Fp16Tensor),
            8 => Ok(ComputeKind::Int8Tensor),
            4 => Ok(ComputeKind::Int4Tensor),
            other => Err(Error::InvalidConfig(format!("activation width {other}"))),
        }
    }

    pub fn label(&self) -> String {
        format!("W{}A{}KV{}", self.weight_bits, self.act_bits, self.kv_bits)
    }

    /// Parse labels like `W4A8`, `w4a8kv4`. KV defaults to the activation
    /// width when absent.
    pub fn parse(label: &str) -> Result<Self> {
        let up = label.to_ascii_uppercase();
        let rest = up
            .strip_prefix('W')
            .ok_or_else(|| Error::InvalidConfig(format!("bad precision label {label:?}")))?;
        let a_pos = rest
            .find('A')
            .ok_or_else(|| Error::InvalidConfig(format!("bad precision label {label:?}")))?;
        let w: u32 = rest[..a_pos]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad precision label {label:?}")))?;
        let after = &rest[a_pos + 1..];
        let (a_str, kv) = match after.find("KV") {
            Some(p) => (&after[..p], Some(&after[p + 2..])),
            None => (after, None),
        };
        let a: u32 = a_str
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad precision label {label:?}")))?;
        let kv: u32 = match kv {
            Some(s) => s
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad precision label {label:?}")))?,
            None => a,
        };
        PrecisionConfig::new(w, a, kv)
    }
}

// ---------------------------------------------------------------------------
// GEMM roofline

/// Ops per weight byte for a decode GEMM at batch size m. Each of the n*k
/// weights contributes 2m ops (multiply + add over the batch) and costs
/// weight_bits/8 bytes; activations and outputs are negligible next to the
/// weights for realistic layer shapes, so intensity reduces to
/// 2m * 8 / weight_bits.
pub fn gemm_intensity(m: usize, cfg: &PrecisionConfig) -> f64 {
    2.0 * m as f64 * 8.0 / cfg.weight_bits as f64
}

/// min(peak, bandwidth * intensity) for the config's compute unit.
pub fn gemm_attainable(m: usize, cfg: &PrecisionConfig, hw: &HardwareSpec) -> Result<f64> {
    let peak = hw.peak(cfg.compute_kind()?);
    Ok(peak.min(hw.mem_bandwidth * gemm_intensity(m, cfg)))
}

/// Smallest batch size in [lo, hi] from which `b` is at least as fast as
/// `a`, given that `a` led somewhere earlier in the range. Returns None when
/// `b` never strictly exceeds `a` in the range -- merely drawing level does
/// not count as a crossover.
pub fn crossover(
    a: &PrecisionConfig,
    b: &PrecisionConfig,
    hw: &HardwareSpec,
    lo: usize,
    hi: usize,
) -> Result<Option<usize>> {
    if lo == 0 || hi < lo {
        return Err(Error::InvalidInput(format!("bad batch range {lo}..={hi}")));
    }
    let mut a_led = false;
    let mut b_exceeds = false;
    let mut candidate = None;
    for m in lo..=hi {
        let ta = gemm_attainable(m, a, hw)?;
        let tb = gemm_attainable(m, b, hw)?;
        if ta > tb {
            a_led = true;
            candidate = None; // b fell back behind; any earlier meeting was noise
        } else if a_led && candidate.is_none() {
            candidate = Some(m);
        }
        if tb > ta {
            b_exceeds = true;
        }
    }
    Ok(if b_exceeds { candidate } else { None })
}

// ---------------------------------------------------------------------------
// attention roofline

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    MemoryBound,
    ComputeBound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccumPrecision {
    Fp32,
    Fp16,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundReport {
    pub intensity: f64,
    pub turning_point: f64,
    pub kind: BoundKind,
    /// intensity minus turning point; positive means compute-bound with
    /// room to spare, negative means memory-bound.
    pub margin: f64,
}

/// Decode attention reads each cached element once (kv_bits/8 bytes) and
/// spends 2 ops on the dot-product/weighted-sum plus `dequant_ops` on
/// reconstruction, all on the general-purpose fp32 unit. Accumulating in
/// fp16 doubles that unit's throughput, moving the turning point without
/// changing the intensity.
pub fn attention_bound(
    kv_bits: u32,
    dequant_ops: u32,
    accum: AccumPrecision,
    hw: &HardwareSpec,
) -> Result<BoundReport> {
    if kv_bits == 0 || kv_bits % 2 != 0 || kv_bits > 16 {
        return Err(Error::InvalidConfig(format!("kv width {kv_bits}")));
    }
    let intensity = (8.0 / kv_bits as f64) * (2.0 + dequant_ops as f64);
    let peak = match accum {
        AccumPrecision::Fp32 => hw.peak(ComputeKind::Fp32Cuda),
        AccumPrecision::Fp16 => 2.0 * hw.peak(ComputeKind::Fp32Cuda),
    };
    let turning_point = peak / hw.mem_bandwidth;
    let kind = if intensity >= turning_point {
        BoundKind::ComputeBound
    } else {
        BoundKind::MemoryBound
    };
    Ok(BoundReport {
        intensity,
        turning_point,
        kind,
        margin: intensity - turning_point,
    })
}

// ---------------------------------------------------------------------------
// report emission

/// CSV of attainable GEMM throughput: one row per (m, config).
pub fn emit_csv(
    configs: &[PrecisionConfig],
    hw: &HardwareSpec,
    m_lo: usize,
    m_hi: usize,
) -> Result<String> {
    if m_lo == 0 || m_hi < m_lo {
        return Err(Error::InvalidInput(format!("bad batch range {m_lo}..={m_hi}")));
    }
    let mut out = String::from("m,config,ops_per_s,bound\n");
    for m in m_lo..=m_hi {
        for cfg in configs {
            let t = gemm_attainable(m, cfg, hw)?;
            let peak = hw.peak(cfg.compute_kind()?);
            let bound = if t < peak { "memory" } else { "compute" };
            out.push_str(&format!("{m},{},{t:.6e},{bound}\n", cfg.label()));
        }
    }
    Ok(out)
}

/// Minimal SVG log-log roofline sketch of the same data. Nothing fancy:
/// polylines on a fixed canvas, one per config, with axis labels.
pub fn emit_svg(
    configs: &[PrecisionConfig],
    hw: &HardwareSpec,
    m_lo: usize,
    m_hi: usize,
) -> Result<String> {
    if m_lo == 0 || m_hi < m_lo || configs.is_empty() {
        return Err(Error::InvalidInput("bad plot request".into()));
    }
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let xs = |m: usize| {
        let span = ((m_hi as f64).ln() - (m_lo as f64).ln()).max(1e-9);
        PAD + (W - 2.0 * PAD) * ((m as f64).ln() - (m_lo as f64).ln()) / span
    };
    let mut t_min = f64::INFINITY;
    let mut t_max = 0.0f64;
    for cfg in configs {
        for m in [m_lo, m_hi] {
            let t = gemm_attainable(m, cfg, hw)?;
            t_min = t_min.min(t);
            t_max = t_max.max(t);
        }
    }
    let ys = move |t: f64| {
        let span = (t_max.ln() - t_min.ln()).max(1e-9);
        H - PAD - (H - 2.0 * PAD) * (t.ln() - t_min.ln()) / span
    };
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - PAD,
        W - PAD,
        H - PAD
    ));
    svg.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - PAD
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">batch size m (log)</text>\n",
        W / 2.0 - 50.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\">ops/s (log)</text>\n",
        H / 2.0,
        H / 2.0
    ));
    for (i, cfg) in configs.iter().enumerate() {
        let color = colors[i % colors.len()];
        let mut points = String::new();
        let mut m = m_lo;
        while m <= m_hi {
            let t = gemm_attainable(m, cfg, hw)?;
            points.push_str(&format!("{:.1},{:.1} ", xs(m), ys(t)));
            m = (m + (m / 8).max(1)).min(m_hi + 1).max(m + 1);
        }
        let t_end = gemm_attainable(m_hi, cfg, hw)?;
        points.push_str(&format!("{:.1},{:.1}", xs(m_hi), ys(t_end)));
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{points}\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            W - PAD + 4.0,
            ys(t_end) + 4.0,
            cfg.label()
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
