use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use eqprobe::data::{self, LabeledDataset, SyntheticKind};
use eqprobe::handcrafted::{build_equivariant_toy, build_invariant_toy, ToyConfig};
use eqprobe::measure::magnitude_diagnostic;
use eqprobe::measure::{CsvRow, MeasureConfig, PartitionScheme};
use eqprobe::parallel::Execution;
use eqprobe::stats::{correlate_reports, correlation_csv, read_accuracies, ModelScoreTable};
use eqprobe::transforms::{Family, ShiftMode};
use eqprobe::verify::{self, VerifyOptions};
use eqprobe::{load_bundle, measure_network, NetworkSpec, SimilarityKind, Tensor, TransformSweep};

#[derive(Parser)]
#[command(
    name = "eqprobe",
    version,
    about = "Measure learned invariance and equivariance of image networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the measurement against networks with known symmetry.
    Verify(VerifyArgs),
    /// Measure a network over a dataset and a transform sweep.
    Measure(MeasureArgs),
    /// Write an MNIST6 variant as an IDX image/label pair.
    BuildDataset(BuildDatasetArgs),
    /// Rank-correlate per-partition scores of several models with accuracy.
    Correlate(CorrelateArgs),
    /// Summarize a model bundle.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Print verdicts as JSON.
    #[arg(long)]
    json: bool,
    /// Random inputs per toy network.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb one toy filter; every rotation check should then fail.
    #[arg(long, hide = true)]
    corrupt_toy: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args, Clone)]
struct ExecArgs {
    /// Worker threads for the per-sample loop.
    #[arg(long, env = "EQPROBE_WORKERS")]
    workers: Option<usize>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn apply(&self, cfg: &mut MeasureConfig) {
        cfg.execution = if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        };
        cfg.workers = self.workers;
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Toy {
    Invariant,
    Equivariant,
    Translation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Mnist6,
    Mnist6RotInv,
    Mnist6RotEq,
}

#[derive(Args)]
struct MeasureArgs {
    /// Model manifest (JSON).
    #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
    model: Option<PathBuf>,
    /// Weight blob; defaults to the manifest path with a `.bin` extension.
    #[arg(long, requires = "model")]
    blob: Option<PathBuf>,
    /// Use a built-in network instead of a bundle.
    #[arg(long, value_enum)]
    toy: Option<Toy>,
    /// IDX image file.
    #[arg(long, requires = "labels", conflicts_with = "synthetic")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Derive an MNIST6 variant from the IDX input before measuring.
    #[arg(long, value_enum, requires = "images")]
    dataset: Option<Variant>,
    /// Generated inputs instead of a dataset: uniform_noise or gaussian_blobs.
    #[arg(long, required_unless_present = "images")]
    synthetic: Option<SyntheticKind>,
    /// Number of samples (the dataset size if smaller).
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// `z2[:RANGE]` or `c4[:RANGE]`, RANGE like `1-16` or `1,2,3`.
    #[arg(long, default_value = "z2:1-16")]
    sweep: String,
    #[arg(long, default_value = "pearson")]
    similarity: SimilarityKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for report.csv and report.json.
    #[arg(long)]
    out: PathBuf,
    /// circular or zero.
    #[arg(long, default_value = "circular")]
    shift_mode: ShiftMode,
    /// Compare each channel with at most this many channels when maximizing.
    #[arg(long)]
    max_match_channels: Option<usize>,
    /// Include per-channel scores and best matches in report.json.
    #[arg(long)]
    channel_detail: bool,
    /// Also write the magnitude-vs-score diagnostic to diagnostic.json.
    #[arg(long)]
    diagnostic: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct BuildDatasetArgs {
    #[arg(long, value_enum)]
    variant: Variant,
    /// MNIST IDX image file.
    #[arg(long)]
    images: PathBuf,
    /// MNIST IDX label file.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives images.idx and labels.idx.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrelateArgs {
    /// `[MODEL_ID=]PATH` to a report.csv (or its directory). Repeat per model.
    #[arg(long = "report", required = true)]
    reports: Vec<String>,
    /// CSV of `model_id,accuracy`.
    #[arg(long)]
    accuracy: PathBuf,
    /// Output CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    blob: Option<PathBuf>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// A check or measurement ran and failed.
    Check(anyhow::Error),
    /// Bad arguments, unreadable or malformed input.
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Measure(a) => cmd_measure(a),
        Command::BuildDataset(a) => cmd_build_dataset(a).map_err(Failure::from),
        Command::Correlate(a) => cmd_correlate(a).map_err(Failure::from),
        Command::Inspect(a) => cmd_inspect(a).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let mut opts = VerifyOptions {
        samples: a.samples.max(1),
        seed: a.seed,
        corrupt: a.corrupt_toy,
        ..VerifyOptions::default()
    };
    a.exec.apply(&mut opts.measure);
    let report = verify::run_all(&opts).map_err(|e| Failure::Check(e.into()))?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    } else {
        for c in &report.checks {
            println!(
                "{} {:<34} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        Err(Failure::Check(anyhow!(
            "failed checks: {}",
            names.join(", ")
        )))
    }
}

fn default_blob(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn load_model(model: &Path, blob: Option<&Path>) -> anyhow::Result<NetworkSpec> {
    let blob = blob
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_blob(model));
    load_bundle(model, &blob).with_context(|| format!("loading model {}", model.display()))
}

fn toy_network(toy: Toy, seed: u64) -> anyhow::Result<NetworkSpec> {
    Ok(match toy {
        Toy::Invariant => build_invariant_toy(&ToyConfig::default())?,
        Toy::Equivariant => build_equivariant_toy(&ToyConfig::default())?,
        Toy::Translation => verify::translation_net([3, 32, 32], 8, 4, seed)?,
    })
}

fn parse_range(spec: &str) -> anyhow::Result<Vec<u32>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((lo, hi)) = part.split_once('-') {
            let (lo, hi): (u32, u32) = (lo.trim().parse()?, hi.trim().parse()?);
            if lo > hi {
                bail!("empty range `{part}`");
            }
            out.extend(lo..=hi);
        } else {
            out.push(part.parse()?);
        }
    }
    Ok(out)
}

fn parse_sweep(spec: &str) -> anyhow::Result<TransformSweep> {
    let (family, range) = match spec.split_once(':') {
        Some((f, r)) => (f, Some(r)),
        None => (spec, None),
    };
    let family: Family = family.parse().map_err(|e: String| anyhow!(e))?;
    let magnitudes = match (range, family) {
        (Some(r), _) => parse_range(r).with_context(|| format!("bad sweep range in `{spec}`"))?,
        (None, Family::Z2Diagonal) => (1..=16).collect(),
        (None, Family::C4) => vec![1, 2, 3],
    };
    TransformSweep::new(family, magnitudes).with_context(|| format!("invalid sweep `{spec}`"))
}

fn derive_variant(
    d: &LabeledDataset,
    variant: Variant,
    seed: u64,
) -> anyhow::Result<LabeledDataset> {
    let six = data::build_mnist6(d)?;
    Ok(match variant {
        Variant::Mnist6 => six,
        Variant::Mnist6RotInv => data::build_mnist6_rot_inv(&six, seed)?,
        Variant::Mnist6RotEq => data::build_mnist6_rot_eq(&six, seed)?,
    })
}

fn measure_inputs(a: &MeasureArgs, net: &NetworkSpec) -> anyhow::Result<Vec<Tensor>> {
    let n = usize::try_from(a.n).unwrap_or(usize::MAX);
    if let (Some(images), Some(labels)) = (&a.images, &a.labels) {
        let mut d = data::load_idx(images, labels)?;
        if let Some(variant) = a.dataset {
            d = derive_variant(&d, variant, a.seed)?;
        }
        if n > d.len() {
            eprintln!(
                "warning: --n {n} exceeds the dataset size; using all {} samples",
                d.len()
            );
        }
        let mut images = d.into_images();
        images.truncate(n);
        Ok(images)
    } else {
        let kind = a.synthetic.expect("clap requires --images or --synthetic");
        Ok(data::synthetic_batch(n, net.input_shape(), a.seed, kind))
    }
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_measure(a: MeasureArgs) -> Result<(), Failure> {
    let net = match (&a.model, a.toy) {
        (Some(model), _) => load_model(model, a.blob.as_deref())?,
        (None, Some(toy)) => toy_network(toy, a.seed)?,
        (None, None) => unreachable!("clap requires --model or --toy"),
    };
    let sweep = parse_sweep(&a.sweep)?;
    if a.max_match_channels == Some(0) {
        return Err(anyhow!("--max-match-channels must be at least 1").into());
    }
    let samples = measure_inputs(&a, &net)?;
    if samples.is_empty() {
        return Err(anyhow!("the dataset is empty").into());
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut config = MeasureConfig {
        similarity: a.similarity,
        shift_mode: a.shift_mode,
        max_match_channels: a.max_match_channels,
        seed: a.seed,
        channel_detail: a.channel_detail,
        ..MeasureConfig::default()
    };
    a.exec.apply(&mut config);

    let report =
        measure_network(&net, &samples, &sweep, &config).map_err(|e| Failure::Check(e.into()))?;
    let diagnostic = if a.diagnostic {
        let d = magnitude_diagnostic(&net, &samples, &sweep, &config)
            .map_err(|e| Failure::Check(e.into()))?;
        Some(serde_json::to_string_pretty(&d).expect("diagnostic serializes"))
    } else {
        None
    };

    write(&a.out.join("report.csv"), &report.to_csv())?;
    write(&a.out.join("report.json"), &report.to_json())?;
    if let Some(d) = diagnostic {
        write(&a.out.join("diagnostic.json"), &d)?;
    }
    for layer in report.layers.iter().filter(|l| l.mostly_degenerate) {
        eprintln!(
            "warning: layer {} ({}) is mostly constant; its scores come from the zero-variance rule",
            layer.layer_index, layer.layer_kind
        );
    }
    println!(
        "measured {} layers over {} samples ({} {}); wrote {}",
        report.layers.len(),
        report.n_samples,
        report.family,
        report.similarity,
        a.out.display()
    );
    Ok(())
}

fn cmd_build_dataset(a: BuildDatasetArgs) -> anyhow::Result<()> {
    let d = data::load_idx(&a.images, &a.labels)?;
    let out = derive_variant(&d, a.variant, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    out.save_idx(&a.out.join("images.idx"), &a.out.join("labels.idx"))?;
    println!(
        "wrote {} images in {} classes to {}",
        out.len(),
        out.class_count(),
        a.out.display()
    );
    Ok(())
}

fn report_id(spec: &str) -> (String, PathBuf) {
    if let Some((id, path)) = spec.split_once('=') {
        return (id.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(spec);
    let named = if path.is_dir() || path.file_stem().is_some_and(|s| s == "report") {
        let dir = if path.is_dir() {
            Some(path.as_path())
        } else {
            path.parent()
        };
        dir.and_then(Path::file_name)
    } else {
        path.file_stem()
    };
    let id = named
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    (id, path)
}

fn cmd_correlate(a: CorrelateArgs) -> anyhow::Result<()> {
    if a.reports.len() < 2 {
        bail!("correlate needs at least two --report arguments");
    }
    let mut reports = Vec::with_capacity(a.reports.len());
    for spec in &a.reports {
        let (id, mut path) = report_id(spec);
        if path.is_dir() {
            path = path.join("report.csv");
        }
        if reports.iter().any(|(existing, _)| existing == &id) {
            bail!("model id `{id}` given twice");
        }
        let file =
            std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let rows = CsvRow::read_all(file).with_context(|| format!("reading {}", path.display()))?;
        reports.push((id, rows));
    }
    let text = std::fs::read_to_string(&a.accuracy)
        .with_context(|| format!("reading {}", a.accuracy.display()))?;
    let accuracies = read_accuracies(&text)?;
    let table = ModelScoreTable::from_reports(&reports, &accuracies)?;
    let csv = correlation_csv(&correlate_reports(&table));
    match &a.out {
        Some(path) => write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let net = load_model(&a.model, a.blob.as_deref())?;
    let kinds: Vec<_> = net.layers().iter().map(|l| l.kind()).collect();
    let scheme = PartitionScheme::from_kinds(&kinds);
    println!("input shape: {:?}", net.input_shape());
    println!("parameters:  {}", net.param_count());
    println!("{:>5}  {:<16} {:<10} output", "layer", "kind", "partition");
    for (i, (kind, shape)) in kinds.iter().zip(net.output_shapes()).enumerate() {
        println!(
            "{i:>5}  {:<16} {:<10} {shape:?}",
            kind.as_str(),
            scheme.of(i).as_str()
        );
    }
    Ok(())
}
