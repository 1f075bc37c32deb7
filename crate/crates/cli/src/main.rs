use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hierspx::gradcheck::{run_gradcheck, GradcheckConfig};
use hierspx::io::{read_image, read_labels, to_json, write_image, write_labels, write_report};
use hierspx::metrics::{evaluate_pair, DEFAULT_BR_TOLERANCE};
use hierspx::superpixel::{hierarchical_superpixels, overlay_boundaries, ColorSpace, PipelineConfig};
use hierspx::toy::{checkpoint, run_experiment, Decoder, ExperimentConfig};
use hierspx::{Error, FeatureMap, Similarity};
use hierspx_bench::{run_bench, BenchConfig, DEFAULT_CHANNELS};
use serde::Serialize;

const THREADS_ENV: &str = "HIERSPX_THREADS";

#[derive(Parser, Debug)]
#[command(name = "hierspx", version, about = "Hierarchical soft clustering and cluster-based decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hierarchical superpixels of a PPM/PGM image.
    Segment(SegmentArgs),
    /// ASA, boundary recall, undersegmentation error and mIoU of two label maps.
    Metrics(MetricsArgs),
    /// Compare every analytic gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Train the toy network with cluster and/or bilinear decoding.
    TrainToy(TrainArgs),
    /// Time sparse decoding against bilinear and dense decoding.
    Bench(BenchArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SimilarityArg {
    Cosine,
    Nse,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ColorArg {
    Lab,
    Rgb,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long = "pos-weight", default_value_t = 0.5)]
    pos_weight: f64,
    #[arg(long, value_enum, default_value = "nse")]
    similarity: SimilarityArg,
    #[arg(long = "color-space", value_enum, default_value = "lab")]
    color_space: ColorArg,
    /// Finest-level labels as CSV.
    #[arg(long = "labels-out")]
    labels_out: PathBuf,
    /// Input image with finest-level boundaries drawn in yellow.
    #[arg(long = "overlay-out")]
    overlay_out: PathBuf,
    /// Also write `level_<n>.csv` for every level.
    #[arg(long = "per-level-dir")]
    per_level_dir: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long = "br-tolerance", default_value_t = DEFAULT_BR_TOLERANCE)]
    br_tolerance: usize,
    /// JSON report; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Undersegmentation leakage mask as a 0/1 CSV.
    #[arg(long = "leakage-out")]
    leakage_out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
    /// Random instances per small operation.
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum DecoderArg {
    Cluster,
    Bilinear,
    Both,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "both")]
    decoder: DecoderArg,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Side of the square synthetic images.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long = "train-count", default_value_t = 256)]
    train_count: usize,
    #[arg(long = "test-count", default_value_t = 64)]
    test_count: usize,
    /// Dimension of the clustering embedding.
    #[arg(long, default_value_t = hierspx::toy::TOY_K)]
    k: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Trained parameters; with both decoders the decoder name is added before the extension.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    height: usize,
    #[arg(long, default_value_t = 2048)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_CHANNELS)]
    channels: usize,
    /// Also time the parallel path on this many threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

enum Failure {
    Error(Error),
    /// Ran to completion but a check did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = Result<(), Failure>;

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> hierspx::Result<()> {
    match path {
        Some(p) => write_report(value, p),
        None => {
            print!("{}", to_json(value));
            Ok(())
        }
    }
}

fn as_color(image: FeatureMap) -> FeatureMap {
    if image.channels() == 1 {
        FeatureMap::from_fn(image.height(), image.width(), 3, |h, w, _| image.get(h, w, 0))
    } else {
        image
    }
}

#[derive(Serialize)]
struct LevelSummary {
    level: usize,
    seed_grid: String,
    labels: usize,
}

fn segment(a: &SegmentArgs) -> CmdResult {
    let image = as_color(read_image(&a.input)?);
    let config = PipelineConfig {
        levels: a.levels,
        tau: a.tau,
        pos_weight: a.pos_weight,
        similarity: match a.similarity {
            SimilarityArg::Cosine => Similarity::Cosine,
            SimilarityArg::Nse => Similarity::NegSqEuclidean,
        },
        color_space: match a.color_space {
            ColorArg::Lab => ColorSpace::Lab,
            ColorArg::Rgb => ColorSpace::Rgb,
        },
        ..PipelineConfig::default()
    };
    let levels = hierarchical_superpixels(&image, &config)?;
    let finest = &levels[0].labels;
    write_labels(finest, &a.labels_out)?;
    write_image(&overlay_boundaries(&image, finest)?, &a.overlay_out)?;
    if let Some(dir) = &a.per_level_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for (n, level) in levels.iter().enumerate() {
            write_labels(&level.labels, dir.join(format!("level_{}.csv", n + 1)))?;
        }
    }
    let summary: Vec<LevelSummary> = levels
        .iter()
        .enumerate()
        .map(|(n, l)| LevelSummary {
            level: n + 1,
            seed_grid: l.seed_dims.to_string(),
            labels: l.labels.distinct_count(),
        })
        .collect();
    for s in &summary {
        println!("level {}: {} seeds, {} labels", s.level, s.seed_grid, s.labels);
    }
    if let Some(path) = &a.report {
        write_report(&summary, path)?;
    }
    Ok(())
}

fn metrics(a: &MetricsArgs) -> CmdResult {
    let pred = read_labels(&a.pred)?;
    let gt = read_labels(&a.gt)?;
    let report = evaluate_pair(&pred, &gt, a.br_tolerance)?;
    if let Some(path) = &a.leakage_out {
        let mask = hierspx::LabelMap::new(gt.height(), gt.width(), report.leakage.iter().map(|&b| b as u32).collect())?;
        write_labels(&mask, path)?;
    }
    emit(&report, a.report.as_deref())?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let config = GradcheckConfig {
        seed: a.common.seed,
        eps: a.eps,
        threshold: a.threshold,
        instances: a.instances,
    };
    let report = run_gradcheck(&config)?;
    for op in &report.operations {
        eprintln!(
            "{:<32} {:>10.3e} {}",
            op.operation,
            op.max_rel_err,
            if op.passed { "ok" } else { "FAIL" }
        );
    }
    emit(&report, a.report.as_deref())?;
    let failed: Vec<&str> = report.failures().map(|o| o.operation.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check above {:e}: {}",
            a.threshold,
            failed.join(", ")
        )))
    }
}

fn checkpoint_path(base: &Path, decoder: Decoder, both: bool) -> PathBuf {
    if !both {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{decoder}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{decoder}"),
    };
    base.with_file_name(name)
}

fn train_toy(a: &TrainArgs) -> CmdResult {
    let decoders = match a.decoder {
        DecoderArg::Cluster => vec![Decoder::Cluster],
        DecoderArg::Bilinear => vec![Decoder::Bilinear],
        DecoderArg::Both => Decoder::ALL.to_vec(),
    };
    let config = ExperimentConfig {
        decoders,
        iterations: a.iters,
        batch_size: a.batch,
        base_lr: a.lr,
        size: a.size,
        train_count: a.train_count,
        test_count: a.test_count,
        k_dim: a.k,
        seed: a.common.seed,
    };
    let report = run_experiment(&config)?;
    for run in &report.runs {
        println!(
            "{:<8} mIoU {:.4}  pixel acc {:.4}  boundary F {:.4}",
            run.decoder.to_string(),
            run.metrics.miou,
            run.metrics.pixel_acc,
            run.metrics.boundary_f1px
        );
        if let Some(base) = &a.checkpoint {
            checkpoint::save(&run.params, checkpoint_path(base, run.decoder, report.runs.len() > 1))?;
        }
    }
    if let Some(gain) = report.miou_gain {
        println!("cluster - bilinear mIoU: {:+.4}", gain);
    }
    if let Some(path) = &a.report {
        write_report(&report, path)?;
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> CmdResult {
    let config = BenchConfig {
        height: a.height,
        width: a.width,
        levels: a.levels,
        trials: a.trials,
        channels: a.channels,
        threads: a.threads,
        seed: a.common.seed,
    };
    let report = run_bench(&config)?;
    for k in &report.kernels {
        println!(
            "{:<16} threads {:>2}  mean {:.6}s  median {:.6}s  min {:.6}s",
            k.kernel, k.threads, k.mean_s, k.median_s, k.min_s
        );
    }
    for s in &report.skipped {
        println!("{:<16} skipped: {}", s.kernel, s.reason);
    }
    match &a.report {
        Some(path) => write_report(&report, path)?,
        None => print!("{}", to_json(&report)),
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV}={value:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Error(Error::ResourceLimit(format!("cannot size the thread pool: {e}"))))
}

fn run(cli: &Cli) -> CmdResult {
    configure_threads()?;
    match &cli.command {
        Command::Segment(a) => segment(a),
        Command::Metrics(a) => metrics(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("hierspx: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("hierspx: {e}");
            ExitCode::from(2)
        }
    }
}
