//! `mild` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mild::analysis::{emit_curves, CurveSpec};
use mild::bayes::{LikelihoodMode, NeighborhoodMode};
use mild::dataset::{
    generate_synthetic, load_ground_truth, matrix_to_pairs, read_dataset, write_dataset,
    write_ground_truth, SyntheticSpec, Triangle,
};
use mild::eval::Granularity;
use mild::pipeline::{evaluate, write_run_dir, TimingSummary};
use mild::{run_lcd, RunConfig, SubstringConfig};

#[derive(Parser)]
#[command(
    name = "mild",
    version,
    about = "Loop-closure detection with multi-index hashing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run detection over a descriptor dataset and write a run directory.
    Run(RunArgs),
    /// Generate a synthetic dataset and its ground truth.
    Synth(SynthArgs),
    /// Write recall and accuracy/cost curves as CSV.
    Analyze(AnalyzeArgs),
    /// Convert a dense N×N ground-truth matrix into a pair list.
    GtConvert(GtConvertArgs),
    /// Time the indexed search against exhaustive comparison.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LikelihoodArg {
    Corrected,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum NeighborhoodArg {
    Max,
    NoisyOr,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Pair,
    Event,
}

#[derive(Clone, Copy, ValueEnum)]
enum TriangleArg {
    Upper,
    Lower,
    Both,
}

/// Every `RunConfig` field as an optional override.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML file holding any subset of the run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of substrings per descriptor (must divide 256).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    d0: Option<u32>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    p_stay: Option<f64>,
    #[arg(long)]
    p_leak: Option<f64>,
    /// Neighborhood half-width of the transition model.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    l0: Option<f64>,
    /// Detection threshold on the posterior.
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    prior_new: Option<f64>,
    #[arg(long, value_enum)]
    likelihood: Option<LikelihoodArg>,
    #[arg(long, value_enum)]
    neighborhood: Option<NeighborhoodArg>,
    /// Most recent frames excluded from the candidate set.
    #[arg(long)]
    exclusion_window: Option<usize>,
    /// Bucket capacity; 0 means unbounded.
    #[arg(long)]
    bucket_cap: Option<usize>,
    /// Threads used inside one frame's query.
    #[arg(long)]
    workers: Option<usize>,
    /// Score with exhaustive comparison instead of the index.
    #[arg(long)]
    brute_force: bool,
    /// Bytes per bucket pointer in the memory figure.
    #[arg(long)]
    pointer_size: Option<u64>,
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(m) = self.m {
            cfg.substrings = SubstringConfig::new(m)?;
        }
        set(&mut cfg.similarity.d0, self.d0);
        set(&mut cfg.similarity.sigma, self.sigma);
        set(&mut cfg.bayes.p_stay, self.p_stay);
        set(&mut cfg.bayes.p_leak, self.p_leak);
        set(&mut cfg.bayes.window, self.window);
        set(&mut cfg.bayes.l0, self.l0);
        set(&mut cfg.bayes.p0, self.p0);
        set(&mut cfg.bayes.prior_new, self.prior_new);
        if let Some(l) = self.likelihood {
            cfg.bayes.likelihood = match l {
                LikelihoodArg::Corrected => LikelihoodMode::Corrected,
                LikelihoodArg::Literal => LikelihoodMode::Literal,
            };
        }
        if let Some(n) = self.neighborhood {
            cfg.bayes.neighborhood = match n {
                NeighborhoodArg::Max => NeighborhoodMode::Max,
                NeighborhoodArg::NoisyOr => NeighborhoodMode::NoisyOr,
            };
        }
        set(&mut cfg.exclusion_window, self.exclusion_window);
        if let Some(cap) = self.bucket_cap {
            cfg.bucket_cap = (cap > 0).then_some(cap);
        }
        set(&mut cfg.workers, self.workers);
        cfg.brute_force |= self.brute_force;
        set(&mut cfg.pointer_size, self.pointer_size);
        if let Some(g) = self.granularity {
            cfg.granularity = match g {
                GranularityArg::Pair => Granularity::Pair,
                GranularityArg::Event => Granularity::Event,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Binary descriptor file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Pair-list ground truth; enables evaluation.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Run directory to write.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving `<name>.mild` and `<name>.gt`.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "synthetic")]
    name: String,
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = 200)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loops as `query:candidate`, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "loop_benchmark")]
    loops: Vec<String>,
    /// Use the standard 100-image benchmark with loops 60..=70 → 10..=20.
    #[arg(long)]
    loop_benchmark: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8, 16, 32, 64])]
    m_values: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    d_max: usize,
    /// Largest distance counted as a match.
    #[arg(long, default_value_t = 60)]
    max_distance: usize,
}

#[derive(Args)]
struct GtConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    triangle: TriangleArg,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Benchmark on this dataset instead of a synthetic one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    images: usize,
    #[arg(long, default_value_t = 800)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames (from the end) scored exhaustively for the comparison.
    #[arg(long, default_value_t = 5)]
    brute_frames: usize,
    /// Write the JSON summary here as well as to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
        Command::Analyze(a) => analyze(a),
        Command::GtConvert(a) => gt_convert(a),
        Command::Bench(a) => bench(a),
    }
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    set(&mut cfg.dataset, a.dataset.map(Some));
    set(&mut cfg.ground_truth, a.ground_truth.map(Some));
    set(&mut cfg.output, a.output.map(Some));
    let Some(dataset) = cfg.dataset.clone() else {
        bail!("no dataset given (--dataset or `dataset` in the config file)");
    };
    let Some(output) = cfg.output.clone() else {
        bail!("no output directory given (--output or `output` in the config file)");
    };

    let ds = read_dataset(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
    let report = run_lcd(&ds, &cfg)?;
    let evaluation = match &cfg.ground_truth {
        Some(path) => {
            let gt = load_ground_truth(path, Some(ds.len()))
                .with_context(|| format!("reading {}", path.display()))?;
            Some(evaluate(&report, &gt, cfg.granularity))
        }
        None => None,
    };
    write_run_dir(&output, &cfg, &report, evaluation.as_ref())?;

    let t = &report.timing;
    println!(
        "{} frames, {} detections, mean {:.3} ms/frame, median {:.3} ms/frame",
        report.frames.len(),
        report.detections().iter().map(Vec::len).sum::<usize>(),
        t.mean_ms,
        t.median_ms
    );
    if let Some(e) = &evaluation {
        println!(
            "precision {:.4} recall {:.4} at p0 = {}; recall at 100% precision {:.4}",
            e.at_threshold.precision,
            e.at_threshold.recall,
            cfg.bayes.p0,
            e.recall_at_full_precision
        );
    }
    println!("wrote {}", output.display());
    Ok(())
}

fn parse_loop(s: &str) -> Result<(usize, usize)> {
    let (q, c) = s
        .split_once(':')
        .with_context(|| format!("loop `{s}` is not `query:candidate`"))?;
    Ok((q.trim().parse()?, c.trim().parse()?))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = if a.loop_benchmark {
        SyntheticSpec {
            name: a.name.clone(),
            ..SyntheticSpec::loop_benchmark(a.seed)
        }
    } else {
        let loops = a
            .loops
            .iter()
            .map(|s| parse_loop(s))
            .collect::<Result<Vec<_>>>()?;
        SyntheticSpec {
            name: a.name.clone(),
            n_images: a.images,
            features_per_image: a.features,
            rng_seed: a.seed,
            ..SyntheticSpec::default()
        }
        .with_loops(&loops)
    };
    let (ds, gt) = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out_dir)?;
    let ds_path = a.out_dir.join(format!("{}.mild", a.name));
    let gt_path = a.out_dir.join(format!("{}.gt", a.name));
    write_dataset(&ds, &ds_path)?;
    write_ground_truth(&gt, &gt_path)?;
    println!(
        "{} images × {} features, {} loop pairs → {}, {}",
        ds.len(),
        spec.features_per_image,
        gt.len(),
        ds_path.display(),
        gt_path.display()
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    for &m in &a.m_values {
        if m == 0 || 256 % m != 0 {
            bail!("m = {m} does not divide 256");
        }
    }
    let spec = CurveSpec {
        m_values: a.m_values,
        d_max: a.d_max.min(256),
        max_distance: a.max_distance.min(256),
        ..CurveSpec::default()
    };
    let (recall, tradeoff) = emit_curves(&a.out_dir, &spec)?;
    println!("wrote {}, {}", recall.display(), tradeoff.display());
    Ok(())
}

fn gt_convert(a: GtConvertArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let triangle = match a.triangle {
        TriangleArg::Upper => Triangle::Upper,
        TriangleArg::Lower => Triangle::Lower,
        TriangleArg::Both => Triangle::Both,
    };
    let gt = matrix_to_pairs(&text, triangle)?;
    write_ground_truth(&gt, &a.output)?;
    println!("{} pairs → {}", gt.len(), a.output.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchSummary {
    images: usize,
    features: usize,
    workers: usize,
    indexed: TimingSummary,
    /// Mean exhaustive similarity time over the sampled frames.
    brute_force_mean_ms: f64,
    /// Mean indexed similarity time over the same frames.
    indexed_similarity_mean_ms: f64,
    speedup: f64,
    memory_bytes: u64,
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    cfg.brute_force = false;
    let ds = match &a.dataset {
        Some(p) => read_dataset(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let spec = SyntheticSpec {
                name: "bench".into(),
                n_images: a.images,
                features_per_image: a.features,
                rng_seed: a.seed,
                ..SyntheticSpec::default()
            };
            generate_synthetic(&spec)?.0
        }
    };
    if ds.len() < 2 {
        bail!("benchmark needs at least two images");
    }

    let report = run_lcd(&ds, &cfg)?;
    let sampled = a.brute_frames.clamp(1, ds.len() - 1);
    let (brute_ms, indexed_ms) = brute_force_sample(&ds, &cfg, sampled, &report)?;
    let summary = BenchSummary {
        images: ds.len(),
        features: ds.total_features(),
        workers: cfg.workers,
        indexed: report.timing,
        brute_force_mean_ms: brute_ms,
        indexed_similarity_mean_ms: indexed_ms,
        speedup: brute_ms / indexed_ms.max(f64::MIN_POSITIVE),
        memory_bytes: report.memory_bytes,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    println!("{json}");
    if let Some(p) = &a.output {
        write_text(p, &json)?;
    }
    Ok(())
}

// Times exhaustive scoring of the last `k` frames against their eligible
// history and pairs it with the indexed similarity time of those frames.
fn brute_force_sample(
    ds: &mild::DescriptorDataset,
    cfg: &RunConfig,
    k: usize,
    report: &mild::RunReport,
) -> Result<(f64, f64)> {
    use mild::index::MultiIndexTables;
    use mild::similarity::brute_force_scores;

    let first = ds.len() - k;
    let mut tables = MultiIndexTables::new(cfg.substrings, None)?;
    for (i, img) in ds.images[..first].iter().enumerate() {
        tables.insert_image(i, img)?;
    }
    let mut brute = 0.0;
    let mut indexed = 0.0;
    for n in first..ds.len() {
        let eligible = n.saturating_sub(cfg.exclusion_window);
        let t = Instant::now();
        let s = brute_force_scores(&tables, &ds.images[n], &cfg.similarity, Some(eligible));
        brute += t.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(s);
        indexed += report.frames[n].timing.similarity_us / 1e3;
        tables.insert_image(n, &ds.images[n])?;
    }
    Ok((brute / k as f64, indexed / k as f64))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
