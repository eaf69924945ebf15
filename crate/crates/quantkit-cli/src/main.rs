//! Command-line front end: quantize blocks, run the exhaustive self-check
//! suites, emit roofline reports, simulate paged 4-bit KV decode, and print
//! fidelity reports for previously quantized containers.
//!
//! Exit codes: 0 success, 1 check/IO failure, 2 usage error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use quantkit::check::run_suite;
use quantkit::container::Container;
use quantkit::kv::{attention_decode, attention_reference, KvBits, KvPageStore};
use quantkit::matrix::Matrix;
use quantkit::pipeline::{
    apply_qoq, calibrate, crafted_suite_entry, evaluate_fidelity, BlockDims, QuantRecipe,
    ToyBlock, WeightMode,
};
use quantkit::roofline::{crossover, emit_csv, emit_svg, HardwareSpec, PrecisionConfig};
use quantkit::serialize::{
    read_quantized_block, read_toy_block, write_quantized_block, write_toy_block, KIND_QUANTIZED,
    KIND_TOY_BLOCK,
};
use quantkit::synth;
use quantkit::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "quantkit",
    version,
    about = "4-bit weight / 8-bit activation / 4-bit KV quantization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize a block container (or a synthesized toy block) and write
    /// the result with everything needed for later evaluation
    Quantize(QuantizeArgs),
    /// Run one of the exhaustive self-check suites
    Check {
        #[arg(value_enum)]
        suite: Suite,
    },
    /// Emit a CSV + SVG roofline report and print the batch crossover
    Roofline(RooflineArgs),
    /// Fill a paged 4-bit cache from a synthetic decode trace and report
    /// round-trip and attention fidelity
    KvSim(KvSimArgs),
    /// Print the fidelity report stored alongside a quantized container
    Eval {
        /// container produced by `quantize`
        input: PathBuf,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Suite {
    Gemm,
    Lanes,
    Kv,
    Protective,
}

impl Suite {
    fn key(self) -> &'static str {
        match self {
            Suite::Gemm => "gemm",
            Suite::Lanes => "lanes",
            Suite::Kv => "kv",
            Suite::Protective => "protective",
        }
    }
}

#[derive(Args)]
struct QuantizeArgs {
    /// input container holding a float block; omitted = synthesize a toy
    /// block from --seed
    input: Option<PathBuf>,
    /// output container path
    #[arg(long)]
    out: PathBuf,
    /// seed for synthesis and calibration data
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// weight quantization group size (must divide every input dimension)
    #[arg(long, default_value_t = 64)]
    group_size: usize,
    /// key-smoothing exponent; 0 disables the stage
    #[arg(long, default_value_t = 0.5)]
    alpha_smooth: f64,
    /// output-module smoothing exponent; 0 disables the stage
    #[arg(long, default_value_t = 0.1)]
    alpha_output: f64,
    /// number of weight-clipping grid points between 0.5 and 1.0;
    /// 0 disables the search
    #[arg(long, default_value_t = 20)]
    clip_grid: usize,
    /// skip the input rotation stage
    #[arg(long)]
    no_rotate: bool,
    /// skip the channel-reordering stage
    #[arg(long)]
    no_reorder: bool,
    /// per-output-channel 4-bit weights instead of the two-level
    /// per-group scheme
    #[arg(long)]
    per_channel: bool,
}

#[derive(Args)]
struct RooflineArgs {
    /// hardware description file (defaults to the built-in A100 preset)
    #[arg(long)]
    hw: Option<PathBuf>,
    /// comma-separated precision labels, e.g. w4a16,w8a8,w4a8kv4
    #[arg(long, default_value = "w4a16,w8a8,w4a8kv4")]
    configs: String,
    /// smallest batch size
    #[arg(long, default_value_t = 1)]
    m_min: usize,
    /// largest batch size
    #[arg(long, default_value_t = 1024)]
    m_max: usize,
    /// output base path; writes <out>.csv and <out>.svg
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KvSimArgs {
    /// seed for the synthetic decode trace
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// optional file for the report (defaults to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Quantize(args) => cmd_quantize(args),
        Cmd::Check { suite } => cmd_check(suite),
        Cmd::Roofline(args) => cmd_roofline(args),
        Cmd::KvSim(args) => cmd_kv_sim(args),
        Cmd::Eval { input } => cmd_eval(input),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn usage_exit() -> ExitCode {
    ExitCode::from(2)
}

// ---------------------------------------------------------------------------
// quantize

fn build_recipe(a: &QuantizeArgs) -> QuantRecipe {
    let mut recipe = QuantRecipe::full(a.group_size);
    if a.per_channel {
        recipe.weight_mode = WeightMode::PerChannelU4;
    }
    recipe.rotate = !a.no_rotate;
    recipe.reorder = !a.no_reorder;
    recipe.smooth_attention = (a.alpha_smooth > 0.0).then_some(a.alpha_smooth);
    recipe.output_smooth = (a.alpha_output > 0.0).then_some(a.alpha_output);
    // n = 20 reproduces default_clip_grid() exactly
    recipe.clip_grid = match a.clip_grid {
        0 => None,
        1 => Some(vec![1.0]),
        n => Some(
            (0..n)
                .map(|i| 0.5 + 0.5 * i as f64 / (n - 1) as f64)
                .collect(),
        ),
    };
    recipe
}

fn load_block(path: &PathBuf) -> Result<ToyBlock> {
    let bytes = fs::read(path).map_err(Error::Io)?;
    let c = Container::from_bytes(&bytes)?;
    let kind = c.require_note("kind")?;
    if kind != KIND_TOY_BLOCK && kind != KIND_QUANTIZED {
        return Err(Error::Container(format!("unexpected container kind {kind:?}")));
    }
    read_toy_block(&c, "block.")
}

fn cmd_quantize(args: QuantizeArgs) -> Result<ExitCode> {
    let (block, x_calib, x_eval) = match &args.input {
        Some(path) => {
            let block = load_block(path)?;
            let hidden = block.dims.hidden;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let x_calib = synth::outlier_activations(&mut rng, 24, hidden, 3, 8.0);
            let x_eval = synth::outlier_activations(&mut rng, 16, hidden, 3, 8.0);
            (block, x_calib, x_eval)
        }
        None => crafted_suite_entry(args.seed, BlockDims::toy())?,
    };

    let stats = calibrate(&block, &x_calib)?;
    let recipe = build_recipe(&args);
    let qb = apply_qoq(&block, &recipe, &stats)?;

    let mut c = Container::new();
    c.add_note("kind", KIND_QUANTIZED)?;
    c.add_note("seed", &args.seed.to_string())?;
    write_toy_block(&mut c, "block.", &block)?;
    write_quantized_block(&mut c, "quant.", &qb)?;
    c.put_matrix("eval.x", &x_eval)?;
    fs::write(&args.out, c.to_bytes()).map_err(Error::Io)?;

    println!("wrote {} ({})", args.out.display(), qb.recipe_summary);
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// check

fn cmd_check(suite: Suite) -> Result<ExitCode> {
    let report = run_suite(suite.key())?;
    print!("{}", report.render());
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

// ---------------------------------------------------------------------------
// roofline

fn cmd_roofline(args: RooflineArgs) -> Result<ExitCode> {
    if args.m_min == 0 || args.m_max < args.m_min {
        eprintln!(
            "usage error: empty batch range {}..={}",
            args.m_min, args.m_max
        );
        return Ok(usage_exit());
    }
    let hw = match &args.hw {
        Some(path) => HardwareSpec::from_config_str(&fs::read_to_string(path).map_err(Error::Io)?)?,
        None => HardwareSpec::a100(),
    };
    let configs = args
        .configs
        .split(',')
        .map(|s| PrecisionConfig::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if configs.is_empty() {
        eprintln!("usage error: no precision configs given");
        return Ok(usage_exit());
    }

    let csv = emit_csv(&configs, &hw, args.m_min, args.m_max)?;
    let svg = emit_svg(&configs, &hw, args.m_min, args.m_max)?;
    fs::write(args.out.with_extension("csv"), csv).map_err(Error::Io)?;
    fs::write(args.out.with_extension("svg"), svg).map_err(Error::Io)?;

    println!(
        "roofline on {}: m in {}..={}, configs {}",
        hw.name,
        args.m_min,
        args.m_max,
        configs
            .iter()
            .map(|c| c.label())
            .collect::<Vec<_>>()
            .join(",")
    );
    if configs.len() >= 2 {
        match crossover(&configs[0], &configs[1], &hw, args.m_min, args.m_max)? {
            Some(m) => println!(
                "crossover: {} overtakes {} at m = {m}",
                configs[1].label(),
                configs[0].label()
            ),
            None => println!(
                "crossover: {} never overtakes {} in range",
                configs[1].label(),
                configs[0].label()
            ),
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// kv-sim

fn cmd_kv_sim(args: KvSimArgs) -> Result<ExitCode> {
    const HEADS: usize = 2;
    const DIM: usize = 16;
    const PAGE: usize = 7;
    const TOKENS: usize = 48;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut store = KvPageStore::new(HEADS, DIM, PAGE, KvBits::Four)?;
    let mut keys = vec![Vec::new(); HEADS];
    let mut values = vec![Vec::new(); HEADS];
    for _ in 0..TOKENS {
        let k = synth::gaussian_matrix(&mut rng, HEADS, DIM, 2.0);
        let v = synth::gaussian_matrix(&mut rng, HEADS, DIM, 2.0);
        for h in 0..HEADS {
            keys[h].push(k.row(h).to_vec());
            values[h].push(v.row(h).to_vec());
        }
        store.append_token(&k, &v)?;
    }

    let mut worst_rt = 0.0f64;
    for h in 0..HEADS {
        for t in 0..TOKENS {
            let kd = store.key(h, t)?;
            let vd = store.value(h, t)?;
            for c in 0..DIM {
                worst_rt = worst_rt.max((kd[c] - keys[h][t][c]).abs());
                worst_rt = worst_rt.max((vd[c] - values[h][t][c]).abs());
            }
        }
    }

    let q = synth::gaussian_matrix(&mut rng, HEADS, DIM, 1.0);
    let decoded = attention_decode(&store, &q, None)?;
    let mut att_mse = 0.0;
    for h in 0..HEADS {
        let exact = attention_reference(q.row(h), &keys[h], &values[h]);
        for c in 0..DIM {
            let d = decoded.get(h, c) - exact[c];
            att_mse += d * d;
        }
    }
    att_mse /= (HEADS * DIM) as f64;

    let report = format!(
        "kv-sim: {TOKENS} tokens, {HEADS} heads x {DIM} dims, page {PAGE}\n\
         pages allocated: {}\n\
         bytes per page: {}\n\
         worst element round-trip error: {worst_rt:.6}\n\
         decode attention mse vs exact cache: {att_mse:.3e}\n",
        store.num_pages(),
        store.page_bytes(0)?.len(),
    );
    match &args.out {
        Some(path) => fs::write(path, report).map_err(Error::Io)?,
        None => print!("{report}"),
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(input: PathBuf) -> Result<ExitCode> {
    let bytes = fs::read(&input).map_err(Error::Io)?;
    let c = Container::from_bytes(&bytes)?;
    let kind = c.require_note("kind")?;
    if kind != KIND_QUANTIZED {
        return Err(Error::Container(format!(
            "eval needs a quantized container, got kind {kind:?}"
        )));
    }
    let block = read_toy_block(&c, "block.")?;
    let qb = read_quantized_block(&c, "quant.")?;
    let x_eval: Matrix = c.get_matrix("eval.x")?;
    let report = evaluate_fidelity(&block, &qb, &x_eval)?;
    print!("{}", report.render());
    Ok(ExitCode::SUCCESS)
}
