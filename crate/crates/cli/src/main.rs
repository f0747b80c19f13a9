//! Command-line pipeline: synthesize change-pair datasets, train the
//! detector, evaluate checkpoints, and benchmark dense vs. sparse
//! attention.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.
//! Results go to stdout; logs and progress go to stderr.

mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use sscd_core::dataset::{self, Sample};
use sscd_core::model::ChangeNet;
use sscd_core::synth::{generate_pair, SyntheticSpec};
use sscd_core::train;
use sscd_core::{checkpoint, flops, metrics, parallel};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {}", m),
            CliError::Runtime(m) => write!(f, "runtime error: {}", m),
        }
    }
}

fn runtime(e: sscd_core::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "sscd",
    about = "Siamese sparse-attention change detection: synth / train / eval / bench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic change-pair dataset (A/, B/, label/).
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints change-class F1/IoU/OA as JSON.
    Eval(EvalArgs),
    /// Benchmark attention cost across sparsity factors; prints CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Square image side.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Base seed; omitted, one is drawn and printed.
    #[arg(long)]
    seed: Option<u64>,
    /// Nuisance level >= 0 scaling brightness shift, noise, and shadows.
    #[arg(long, default_value_t = 0.5)]
    nuisance: f64,
    /// Semantic change rectangles per pair.
    #[arg(long, default_value_t = 2)]
    changes: usize,
    /// Smallest change-rectangle side.
    #[arg(long, default_value_t = 12)]
    change_min: usize,
    /// Largest change-rectangle side.
    #[arg(long, default_value_t = 26)]
    change_max: usize,
    /// Persistent background shapes per pair.
    #[arg(long, default_value_t = 6)]
    background: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration (flat keys; unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory (A/, B/, label/).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the metric log.
    #[arg(long)]
    out: PathBuf,
    /// Separate validation dataset directory; defaults to a held-out
    /// tail of --data.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the config batch size.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory to score.
    #[arg(long)]
    data: PathBuf,
    /// Write predicted masks (0/255 rasters) here, one per input pair.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sparsity factors.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    gammas: Vec<usize>,
    /// Comma-separated square map sides.
    #[arg(long, value_delimiter = ',', default_value = "64,128")]
    size: Vec<usize>,
    /// Channel width of the benchmarked map.
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Timing repeats per configuration (median reported).
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                eprintln!("{}", e);
                return ExitCode::from(1);
            }
            // help/version requests are success.
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e);
            match e {
                CliError::Validation(_) => ExitCode::from(1),
                CliError::Runtime(_) => ExitCode::from(2),
            }
        }
    }
}

/// Draw a seed from OS entropy when none was given, and print whichever
/// seed is in effect so the run can be reproduced after the fact.
fn resolve_seed(given: Option<u64>) -> u64 {
    let seed = given.unwrap_or_else(|| {
        use std::time::{SystemTime, UNIX_EPOCH};
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_nanos() as u64;
        nanos.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ std::process::id() as u64
    });
    eprintln!("seed: {}", seed);
    seed
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        background_shapes: a.background,
        change_shapes: a.changes,
        change_size: (a.change_min, a.change_max),
        ..SyntheticSpec::new(a.size).with_nuisance_level(a.nuisance)
    };
    if a.nuisance < 0.0 {
        return Err(CliError::Validation(format!(
            "nuisance must be >= 0, got {}",
            a.nuisance
        )));
    }
    spec.validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {}", a.out.display(), e)))?;

    let seed = resolve_seed(a.seed);
    for i in 0..a.n {
        let sample = generate_pair(&spec, seed.wrapping_add(i as u64)).map_err(runtime)?;
        let name = format!("pair_{:05}.png", i);
        dataset::save_sample(&a.out, &name, &sample).map_err(runtime)?;
    }
    let manifest = serde_json::json!({
        "n": a.n,
        "size": a.size,
        "seed": seed,
        "nuisance": a.nuisance,
        "change_shapes": a.changes,
        "change_size": [a.change_min, a.change_max],
        "background_shapes": a.background,
    });
    std::fs::write(
        a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable") + "\n",
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    eprintln!("wrote {} pairs under {}", a.n, a.out.display());
    Ok(())
}

fn load_split(
    data: &PathBuf,
    val_data: Option<&PathBuf>,
    val_fraction: f64,
) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let all = dataset::load_dataset(data).map_err(|e| CliError::Validation(e.to_string()))?;
    if all.is_empty() {
        return Err(CliError::Validation(format!(
            "no samples under {}",
            data.display()
        )));
    }
    match val_data {
        Some(dir) => {
            let val =
                dataset::load_dataset(dir).map_err(|e| CliError::Validation(e.to_string()))?;
            Ok((all, val))
        }
        None => {
            let n_val = ((all.len() as f64 * val_fraction).round() as usize).min(all.len() - 1);
            let split = all.len() - n_val;
            let mut train_set = all;
            let val = train_set.split_off(split);
            Ok((train_set, val))
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = Some(s);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let (train_set, val_set) = load_split(&a.data, a.val_data.as_ref(), cfg.val_fraction)?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {}", a.out.display(), e)))?;

    let seed = resolve_seed(cfg.seed);
    let train_cfg = cfg.train_config(seed);
    let mut model = ChangeNet::new(model_cfg, seed).map_err(runtime)?;
    eprintln!(
        "training on {} pairs ({} validation), {} parameters",
        train_set.len(),
        val_set.len(),
        model.param_count()
    );
    let log =
        train::fit(&mut model, &train_set, &val_set, &train_cfg, Some(&a.out)).map_err(runtime)?;
    for r in &log {
        eprintln!("{}", train::format_log_line(r));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    if !a.ckpt.is_file() {
        return Err(CliError::Validation(format!(
            "checkpoint {} does not exist",
            a.ckpt.display()
        )));
    }
    let names = dataset::sample_names(&a.data).map_err(|e| CliError::Validation(e.to_string()))?;
    if names.is_empty() {
        return Err(CliError::Validation(format!(
            "no samples under {}",
            a.data.display()
        )));
    }
    let mut model = checkpoint::load(&a.ckpt).map_err(|e| CliError::Validation(e.to_string()))?;

    let mut counts = metrics::ConfusionCounts::default();
    for name in &names {
        let sample = dataset::load_sample(&a.data, name).map_err(runtime)?;
        let pred = model.predict(&sample.pair).map_err(runtime)?;
        counts.merge(&metrics::confusion(&pred, &sample.mask).map_err(runtime)?);
        if let Some(dir) = &a.dump_masks {
            dataset::save_mask(&dir.join(name), &pred).map_err(runtime)?;
        }
    }
    let report = metrics::metrics(&counts).map_err(runtime)?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    // Full validation before any model-scale allocation.
    if a.repeats == 0 {
        return Err(CliError::Validation("repeats must be >= 1".into()));
    }
    for &g in &a.gammas {
        if g == 0 || !g.is_power_of_two() {
            return Err(CliError::Validation(format!(
                "gamma must be a power of two, got {}",
                g
            )));
        }
        for &s in &a.size {
            if s % g != 0 {
                return Err(CliError::Validation(format!(
                    "size {} not divisible by gamma {}",
                    s, g
                )));
            }
        }
    }
    if a.channels == 0 || a.heads == 0 || a.channels % a.heads != 0 {
        return Err(CliError::Validation(format!(
            "channels {} not divisible by heads {}",
            a.channels, a.heads
        )));
    }

    println!("gamma,size,flops,ms,bytes");
    for &size in &a.size {
        for &gamma in &a.gammas {
            let (macs, ms, bytes) = parallel::run_single_threaded(|| {
                bench_one(gamma, size, a.channels, a.heads, a.repeats)
            })
            .map_err(runtime)?;
            println!("{},{},{},{:.3},{}", gamma, size, macs, ms, bytes);
        }
    }
    Ok(())
}

/// Exact attention MAC count, median wall time, and tape bytes of one
/// sparse-attention forward at the given geometry.
fn bench_one(
    gamma: usize,
    size: usize,
    channels: usize,
    heads: usize,
    repeats: usize,
) -> sscd_core::Result<(u64, f64, usize)> {
    use rand::{Rng, SeedableRng};
    use sscd_core::attention::{
        ssa_forward, AttnParams, ClipMode, OffsetParams, SSAConfig, SsaParams,
    };
    use sscd_core::tape::Tape;
    use sscd_core::tensor::Tensor;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let feat = Tensor::from_fn(&[1, channels, size, size], |_| rng.gen::<f32>() - 0.5);
    let weights: Vec<Tensor<f32>> = (0..4)
        .map(|_| Tensor::from_fn(&[channels, channels], |_| (rng.gen::<f32>() - 0.5) * 0.1))
        .collect();

    let cfg = SSAConfig {
        gamma,
        offset_clip: gamma as f64,
        heads,
        dim: channels,
        mlp_ratio: 4,
        clip_mode: ClipMode::Smooth,
    };
    let mut times = Vec::with_capacity(repeats);
    let mut macs = 0u64;
    let mut bytes = 0usize;
    for _ in 0..repeats {
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(feat.clone());
        let zero_b = tape.constant(Tensor::zeros(&[channels]));
        let params = SsaParams {
            offset: OffsetParams {
                w: tape.constant(Tensor::zeros(&[2, channels, 3, 3])),
                b: tape.constant(Tensor::zeros(&[2])),
            },
            attn: AttnParams {
                wq: tape.constant(weights[0].clone()),
                bq: zero_b,
                wk: tape.constant(weights[1].clone()),
                bk: zero_b,
                wv: tape.constant(weights[2].clone()),
                bv: zero_b,
                wo: tape.constant(weights[3].clone()),
                bo: zero_b,
            },
        };
        flops::reset();
        let t0 = Instant::now();
        ssa_forward(&mut tape, f, &cfg, &params)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        macs = flops::total_macs();
        bytes = tape.bytes_allocated();
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let median = times[times.len() / 2];
    Ok((macs, median, bytes))
}
