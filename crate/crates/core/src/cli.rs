//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE`, a flat `key = value` file whose keys are flag
//! names without the leading dashes. Flags given on the command line win over the file.
//!
//! Exit codes: 0 success, 1 partial batch failure or I/O error, 2 usage or dependency error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use crate::decomposition;
use crate::error::{Error, Result};
use crate::fusion::{DEFAULT_CROP_FRACTION, DEFAULT_TARGET_MEAN};
use crate::image::Image;
use crate::metrics::{self, MetricReport};
use crate::pipeline::{EnhanceOptions, Pipeline};
use crate::train::{self, PairDataset, TrainConfig, Upstream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kind-lce", version, about = "Low-light image enhancement toolkit")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Enhance low-light PPM images with trained checkpoints.
    Enhance(EnhanceArgs),
    /// Write illumination and reflectance maps of PPM images.
    Decompose(DecomposeArgs),
    /// Full-reference metrics between reference and test images.
    Metrics(MetricsArgs),
    /// Train one pipeline stage.
    Train(TrainArgs),
    /// Generate synthetic low/normal training pairs.
    Synth(SynthArgs),
    /// Time the full enhancement pipeline.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` file mirroring the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineFlags {
    #[arg(long)]
    decom: Option<PathBuf>,
    #[arg(long)]
    restore: Option<PathBuf>,
    #[arg(long)]
    illum: Option<PathBuf>,
    #[arg(long = "target-mean", default_value_t = DEFAULT_TARGET_MEAN)]
    target_mean: f64,
    #[arg(long = "crop-fraction", default_value_t = DEFAULT_CROP_FRACTION)]
    crop_fraction: f64,
    #[arg(long = "curve-mode", default_value = "iterative")]
    curve_mode: String,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Input PPM files or directories of them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    decom: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[command(flatten)]
    common: Common,
    /// Reference file or directory.
    reference: PathBuf,
    /// Test file or directory (matched to the reference by file name).
    test: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    stage: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of synthetic pairs when no `--data` directory is given.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Directory with `low/` and `normal/` PPM pairs.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    decom: Option<PathBuf>,
    #[arg(long = "crop-fraction", default_value_t = DEFAULT_CROP_FRACTION)]
    crop_fraction: f64,
    #[arg(long = "curve-mode", default_value = "iterative")]
    curve_mode: String,
    #[arg(long, default_value_t = crate::losses::DEFAULT_BETA)]
    beta: f64,
    /// Checkpoint path; the loss curve goes to `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; pairs land in `low/` and `normal/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Seed for the benchmark image and for weights when no checkpoints are given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses a flat `key = value` file. Blank lines and `#` comments are ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("config line {}: expected key = value", no + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::InvalidArgument(format!("config line {}: empty key", no + 1)));
        }
        out.push((k.trim_start_matches("--").to_string(), v.to_string()));
    }
    Ok(out)
}

/// Splices config-file entries in front of the user's flags so the latter override.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = args.iter().position(|a| a == "--config");
    let path = match pos {
        Some(i) => args
            .get(i + 1)
            .ok_or_else(|| Error::InvalidArgument("--config needs a path".into()))?,
        None => match args.iter().find_map(|a| a.to_str()?.strip_prefix("--config=")) {
            Some(p) => return expand_with(args.clone(), Path::new(p)),
            None => return Ok(args),
        },
    };
    let path = PathBuf::from(path);
    expand_with(args, &path)
}

fn expand_with(args: Vec<OsString>, path: &Path) -> Result<Vec<OsString>> {
    let entries = parse_config(&fs::read_to_string(path)?)?;
    if args.len() < 2 {
        return Ok(args);
    }
    let mut out: Vec<OsString> = args[..2].to_vec();
    for (k, v) in entries {
        if k == "config" {
            continue;
        }
        out.push(format!("--{k}").into());
        out.push(v.into());
    }
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Dependency(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_PARTIAL,
    }
}

/// Runs the CLI on `args` (program name first), writing reports to `out` and diagnostics to
/// `err`. Returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version land here too and belong on stdout.
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    let result = match cli.command {
        Command::Enhance(a) => cmd_enhance(&a, out, err),
        Command::Decompose(a) => cmd_decompose(&a, out, err),
        Command::Metrics(a) => cmd_metrics(&a, out, err),
        Command::Train(a) => cmd_train(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn require(path: &Option<PathBuf>, flag: &str) -> Result<Checkpoint> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Dependency(format!("missing --{flag} checkpoint")))?;
    load_checkpoint(p).map_err(|e| match e {
        Error::Io(io) => Error::Dependency(format!("cannot read {}: {io}", p.display())),
        other => other,
    })
}

fn options(p: &PipelineFlags) -> Result<EnhanceOptions> {
    Ok(EnhanceOptions {
        target_mean: p.target_mean,
        crop_fraction: p.crop_fraction,
        curve_mode: p.curve_mode.parse()?,
        ..EnhanceOptions::default()
    })
}

fn load_pipeline(p: &PipelineFlags) -> Result<Pipeline> {
    let opts = options(p)?;
    Pipeline::from_checkpoints(
        &require(&p.decom, "decom")?,
        &require(&p.restore, "restore")?,
        &require(&p.illum, "illum")?,
        opts,
    )
}

/// Expands directories into their `.ppm` files, sorted by name.
fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ppm"))
                .collect();
            v.sort();
            files.extend(v);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn file_name(p: &Path) -> Result<&std::ffi::OsStr> {
    p.file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", p.display())))
}

fn for_each_input(
    inputs: &[PathBuf],
    err: &mut dyn Write,
    mut f: impl FnMut(&Path) -> Result<()>,
) -> Result<i32> {
    let mut failed = 0;
    for path in collect_inputs(inputs)? {
        if let Err(e) = f(&path) {
            writeln!(err, "{}: {e}", path.display())?;
            failed += 1;
        }
    }
    Ok(if failed > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

fn cmd_enhance(a: &EnhanceArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let pipeline = load_pipeline(&a.pipeline)?;
    fs::create_dir_all(&a.out)?;
    for_each_input(&a.inputs, err, |path| {
        let img = Image::load_ppm(path)?;
        let e = pipeline.enhance(&img)?;
        let dst = a.out.join(file_name(path)?);
        e.output.save_ppm(&dst)?;
        writeln!(out, "{}", dst.display())?;
        Ok(())
    })
}

fn cmd_decompose(a: &DecomposeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let ck = require(&a.decom, "decom")?;
    let params = ck.expect_stage(Stage::Decom)?;
    fs::create_dir_all(&a.out)?;
    for_each_input(&a.inputs, err, |path| {
        let img = Image::load_ppm(path)?;
        let d = decomposition::decompose(params, &img)?;
        let stem = path
            .file_stem()
            .ok_or_else(|| Error::InvalidArgument("input without a name".into()))?
            .to_string_lossy();
        let i_path = a.out.join(format!("{stem}_illumination.ppm"));
        let r_path = a.out.join(format!("{stem}_reflectance.ppm"));
        d.illumination.to_rgb().save_ppm(&i_path)?;
        d.reflectance.save_ppm(&r_path)?;
        writeln!(out, "{}\t{}", i_path.display(), r_path.display())?;
        Ok(())
    })
}

fn cmd_metrics(a: &MetricsArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let pairs: Vec<(PathBuf, PathBuf)> = if a.reference.is_dir() {
        collect_inputs(std::slice::from_ref(&a.test))?
            .into_iter()
            .map(|t| Ok((a.reference.join(file_name(&t)?), t)))
            .collect::<Result<_>>()?
    } else {
        vec![(a.reference.clone(), a.test.clone())]
    };
    let mut reports = Vec::new();
    let mut failed = false;
    for (r, t) in &pairs {
        let res = Image::load_ppm(r)
            .and_then(|ri| Ok((ri, Image::load_ppm(t)?)))
            .and_then(|(ri, ti)| metrics::evaluate(&ri, &ti));
        match res {
            Ok(m) => {
                writeln!(out, "{}\t{}", t.display(), m.to_tsv())?;
                reports.push(m);
            }
            Err(e) => {
                writeln!(err, "{}: {e}", t.display())?;
                failed = true;
            }
        }
    }
    if reports.len() > 1 {
        let avg = MetricReport::average(&reports).expect("non-empty");
        writeln!(out, "mean\t{}", avg.to_tsv())?;
    }
    Ok(if failed { EXIT_PARTIAL } else { EXIT_OK })
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let stage: Stage = a.stage.parse()?;
    let decom = match (stage, &a.decom) {
        (Stage::Decom, _) => None,
        (_, None) => {
            return Err(Error::Dependency(format!(
                "stage {stage} needs --decom with a trained decom checkpoint"
            )))
        }
        (_, d) => Some(require(d, "decom")?),
    };
    let data = match &a.data {
        Some(dir) => PairDataset::from_dir(dir)?,
        None => train::make_synthetic_pairs(a.n, a.size, a.seed)?,
    };
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        seed: a.seed,
        crop_fraction: a.crop_fraction,
        curve_mode: a.curve_mode.parse()?,
        beta: a.beta,
        ..TrainConfig::new(stage)
    };
    let outcome = train::train_stage(
        &cfg,
        &data,
        Upstream {
            decom: decom.as_ref(),
        },
    )?;
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    let mut csv = a.out.clone().into_os_string();
    csv.push(".loss.csv");
    train::write_loss_csv(&csv, &outcome.losses)?;
    writeln!(
        out,
        "{stage}\tsteps={}\tfinal_loss={:.6}\t{}",
        outcome.losses.len(),
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    )?;
    Ok(EXIT_OK)
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let data = train::make_synthetic_pairs(a.n, a.size, a.seed)?;
    let low = a.out.join("low");
    let normal = a.out.join("normal");
    fs::create_dir_all(&low)?;
    fs::create_dir_all(&normal)?;
    for (i, p) in data.pairs.iter().enumerate() {
        let name = format!("{i:04}.ppm");
        p.low.save_ppm(low.join(&name))?;
        p.normal.save_ppm(normal.join(&name))?;
    }
    writeln!(out, "wrote {} pairs to {}", data.len(), a.out.display())?;
    Ok(EXIT_OK)
}

/// Per-iteration timings of the full pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub seconds: Vec<f64>,
    /// `iterations / total time`.
    pub mean_ips: f64,
    /// Throughput at the median latency.
    pub p50_ips: f64,
    /// Throughput at the 95th-percentile (slow) latency.
    pub p95_ips: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Runs `warmup` untimed then `iterations` timed enhancements of `img`.
pub fn bench(pipeline: &Pipeline, img: &Image, iterations: usize, warmup: usize) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("bench needs at least one iteration".into()));
    }
    for _ in 0..warmup {
        pipeline.enhance(img)?;
    }
    let mut seconds = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        pipeline.enhance(img)?;
        seconds.push(t.elapsed().as_secs_f64().max(1e-9));
    }
    let mut sorted = seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = seconds.iter().sum();
    Ok(BenchReport {
        mean_ips: iterations as f64 / total,
        p50_ips: 1.0 / percentile(&sorted, 0.5),
        p95_ips: 1.0 / percentile(&sorted, 0.95),
        seconds,
    })
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let p = &a.pipeline;
    let pipeline = if p.decom.is_none() && p.restore.is_none() && p.illum.is_none() {
        Pipeline::random(a.seed, options(p)?)
    } else {
        load_pipeline(p)?
    };
    let size = a.size.max(16);
    let img = train::make_synthetic_pairs(1, size, a.seed)?.pairs.remove(0).low;
    let r = bench(&pipeline, &img, a.iters, a.warmup)?;
    writeln!(out, "size\t{}x{}", img.height(), img.width())?;
    writeln!(out, "iterations\t{}", r.seconds.len())?;
    writeln!(out, "mean_ips\t{:.3}", r.mean_ips)?;
    writeln!(out, "p50_ips\t{:.3}", r.p50_ips)?;
    writeln!(out, "p95_ips\t{:.3}", r.p95_ips)?;
    Ok(EXIT_OK)
}
