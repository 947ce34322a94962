//! Command-line front end: fold sampling, training, benchmarks, sweeps,
//! method comparison, weight calibration and plot-data export.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semisup::data::FoldSpec;
use semisup::experiment::{
    self, BenchmarkTable, CellOutcome, FoldParams, RunConfig, RunResult, SweepAxis, SweepTable,
};
use semisup::losses::{LossConfig, LossVariant};
use semisup::metrics::ComparisonReport;

/// Environment variable providing the default output directory.
const OUT_DIR_ENV: &str = "SEMISUP_OUT_DIR";

#[derive(Parser)]
#[command(name = "semisup", version, about = "Desk-scale semi-supervised learning laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Output directory (default: $SEMISUP_OUT_DIR, then the working directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel run width for benchmarks and sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample fold files from a dataset configuration.
    SampleFolds(SampleFoldsArgs),
    /// Train one model and write its result JSON.
    Train(TrainArgs),
    /// Run a folds x variants benchmark grid.
    Benchmark(BenchmarkArgs),
    /// Run one training per value of a hyperparameter axis.
    Sweep(SweepArgs),
    /// Compare a method against a baseline fold-wise.
    Compare(CompareArgs),
    /// Calibrate the smooth-variant unsupervised weight from pilot runs.
    Calibrate(CalibrateArgs),
    /// Convert result JSON files into plot-ready CSV series.
    ExportPlots(ExportPlotsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides applied after the file, e.g. `loss.tau=0.9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Fold-sampling seed override.
    #[arg(long)]
    fold_seed: Option<u64>,
    /// Training seed override (initialization, batches, augmentations).
    #[arg(long)]
    train_seed: Option<u64>,
    /// Loss variant override.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Pl,
    Spl,
    Fm,
    Sfm,
}

impl From<VariantArg> for LossVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Pl => LossVariant::Pl,
            VariantArg::Spl => LossVariant::Spl,
            VariantArg::Fm => LossVariant::Fm,
            VariantArg::Sfm => LossVariant::Sfm,
        }
    }
}

#[derive(Args)]
struct SampleFoldsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Protocol override: balanced or random.
    #[arg(long)]
    protocol: Option<String>,
    /// Labels per class (balanced protocol).
    #[arg(long)]
    per_class: Option<usize>,
    /// Total labels (random protocol).
    #[arg(long)]
    n_labels: Option<usize>,
    /// Number of folds to sample, with seeds 0..folds.
    #[arg(long, default_value_t = 6)]
    folds: u64,
    /// Explicit fold seeds, overriding --folds.
    #[arg(long, value_delimiter = ',')]
    fold_seeds: Vec<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Train on a previously sampled fold file instead of resampling.
    #[arg(long)]
    fold: Option<PathBuf>,
    /// Print the default configuration JSON and exit.
    #[arg(long)]
    print_default_config: bool,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Fold seeds of the benchmark rows.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
    fold_seeds: Vec<u64>,
    /// Variant columns.
    #[arg(long, value_delimiter = ',', default_value = "fm,sfm")]
    variants: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Axis: tau, mu, momentum, train_seed, n_labels or keep_fraction.
    #[arg(long)]
    axis: String,
    /// Axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline errors: a JSON array of numbers or of run results.
    #[arg(long, required_unless_present = "table")]
    baseline: Option<PathBuf>,
    /// Method errors: same format as --baseline.
    #[arg(long, required_unless_present = "table")]
    method: Option<PathBuf>,
    /// Compare two columns of a benchmark table instead.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, requires = "table")]
    baseline_col: Option<String>,
    #[arg(long, requires = "table")]
    method_col: Option<String>,
    /// Also write the CSV report here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ExportPlotsArgs {
    /// A sweep table, benchmark table or run result JSON.
    #[arg(long)]
    input: PathBuf,
}

fn parse_override_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// Applies `key=value` pairs onto the config JSON by dotted path. Unknown
/// keys are rejected when the final document is deserialized.
fn apply_overrides(mut doc: serde_json::Value, overrides: &[String]) -> anyhow::Result<serde_json::Value> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
        let segments: Vec<&str> = path.split('.').collect();
        let (last, parents) = segments.split_last().expect("split_once guarantees a nonempty path");
        let mut cursor = &mut doc;
        for seg in parents {
            cursor = cursor
                .as_object_mut()
                .ok_or_else(|| anyhow!("override path `{path}` descends into a non-object"))?
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        cursor
            .as_object_mut()
            .ok_or_else(|| anyhow!("override path `{path}` descends into a non-object"))?
            .insert(last.to_string(), parse_override_value(raw));
    }
    Ok(doc)
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("missing --config (see `train --print-default-config` for a template)"))?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let doc = apply_overrides(doc, &args.overrides)?;
    let mut cfg: RunConfig = serde_json::from_value(doc)
        .with_context(|| format!("config {} (after overrides) is invalid", path.display()))?;
    if let Some(seed) = args.fold_seed {
        cfg.fold_seed = seed;
    }
    if let Some(seed) = args.train_seed {
        cfg.train_seed = seed;
    }
    if let Some(variant) = args.variant {
        cfg.loss.variant = variant.into();
    }
    cfg.validate().map_err(|e| anyhow!("invalid configuration: {e}"))?;
    Ok(cfg)
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn variant_config(base: &LossConfig, name: &str) -> anyhow::Result<(String, LossConfig)> {
    let mut cfg = base.clone();
    cfg.variant = match name {
        "pl" => LossVariant::Pl,
        "spl" => LossVariant::Spl,
        "fm" => LossVariant::Fm,
        "sfm" => LossVariant::Sfm,
        other => bail!("unknown variant `{other}` (expected pl, spl, fm or sfm)"),
    };
    Ok((name.to_string(), cfg))
}

fn errors_from_file(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let arr = doc
        .as_array()
        .ok_or_else(|| anyhow!("{} must hold a JSON array of numbers or run results", path.display()))?;
    arr.iter()
        .map(|item| {
            if let Some(x) = item.as_f64() {
                Ok(x)
            } else if let Some(x) = item.get("last_error").and_then(|v| v.as_f64()) {
                Ok(x)
            } else {
                Err(anyhow!("{}: expected a number or an object with last_error", path.display()))
            }
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let dir = out_dir(&cli.out);
    match cli.cmd {
        Cmd::SampleFolds(args) => {
            let mut cfg = load_config(&args.config)?;
            match args.protocol.as_deref() {
                None => {}
                Some("balanced") => {
                    let per_class = args
                        .per_class
                        .ok_or_else(|| anyhow!("--protocol balanced needs --per-class"))?;
                    cfg.fold = FoldParams::Balanced { per_class };
                }
                Some("random") => {
                    let n_labels = args.n_labels.ok_or_else(|| anyhow!("--protocol random needs --n-labels"))?;
                    cfg.fold = FoldParams::Random { n_labels };
                }
                Some(other) => bail!("unknown protocol `{other}` (expected balanced or random)"),
            }
            let seeds: Vec<u64> =
                if args.fold_seeds.is_empty() { (0..args.folds).collect() } else { args.fold_seeds.clone() };
            ensure_dir(&dir)?;
            let ds = cfg.build_dataset()?;
            for seed in seeds {
                let mut c = cfg.clone();
                c.fold_seed = seed;
                let fold = c.build_fold(&ds)?;
                let path = dir.join(format!("fold_{seed}.json"));
                write_text(&path, &fold.to_json())?;
                println!("wrote {}", path.display());
            }
        }
        Cmd::Train(args) => {
            if args.print_default_config {
                println!("{}", serde_json::to_string_pretty(&RunConfig::default_blobs())?);
                return Ok(());
            }
            let cfg = load_config(&args.config)?;
            let result = match &args.fold {
                None => experiment::run_training(&cfg)?,
                Some(path) => {
                    let text =
                        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let fold = FoldSpec::from_json(&text)?;
                    let ds = cfg.build_dataset()?;
                    if fold.n_points != ds.len() {
                        bail!(
                            "fold file covers {} points but the dataset has {}",
                            fold.n_points,
                            ds.len()
                        );
                    }
                    experiment::run_training_on_fold(&cfg, &ds, &fold)?
                }
            };
            ensure_dir(&dir)?;
            let path = dir.join(format!("run_{}.json", result.config_hash));
            experiment::persist(&result, &path)?;
            println!(
                "run {}: last error {:.4}, best {:.4} at step {} -> {}",
                result.config_hash,
                result.last_error,
                result.best_error,
                result.best_step,
                path.display()
            );
        }
        Cmd::Benchmark(args) => {
            let cfg = load_config(&args.config)?;
            let variants: Vec<(String, LossConfig)> = args
                .variants
                .iter()
                .map(|name| variant_config(&cfg.loss, name))
                .collect::<anyhow::Result<_>>()?;
            let ds = cfg.build_dataset()?;
            let folds: Vec<FoldSpec> = args
                .fold_seeds
                .iter()
                .map(|&seed| {
                    let mut c = cfg.clone();
                    c.fold_seed = seed;
                    c.build_fold(&ds)
                })
                .collect::<semisup::Result<_>>()?;
            let table = with_pool(cli.jobs, || experiment::run_benchmark(&cfg, &folds, &variants))?;
            ensure_dir(&dir)?;
            let path = dir.join("benchmark.json");
            experiment::persist(&table, &path)?;
            for agg in &table.aggregates {
                let std = agg.std.map_or("NA".into(), |s| format!("{s:.4}"));
                println!(
                    "{}: mean {:.4} +- {} (min {:.4}, max {:.4}, {} completed)",
                    agg.variant, agg.mean, std, agg.min, agg.max, agg.completed
                );
            }
            println!("wrote {}", path.display());
        }
        Cmd::Sweep(args) => {
            let cfg = load_config(&args.config)?;
            let axis = match args.axis.as_str() {
                "tau" => SweepAxis::Tau,
                "mu" => SweepAxis::Mu,
                "momentum" => SweepAxis::Momentum,
                "train_seed" => SweepAxis::TrainSeed,
                "n_labels" => SweepAxis::NLabels,
                "keep_fraction" => SweepAxis::KeepFraction,
                other => bail!("unknown sweep axis `{other}`"),
            };
            let table = with_pool(cli.jobs, || experiment::sweep(&cfg, axis, &args.values))?;
            ensure_dir(&dir)?;
            let json_path = dir.join(format!("sweep_{}.json", args.axis));
            let csv_path = dir.join(format!("sweep_{}.csv", args.axis));
            experiment::persist(&table, &json_path)?;
            write_text(&csv_path, &table.to_csv())?;
            print!("{}", table.to_csv());
            println!("wrote {} and {}", json_path.display(), csv_path.display());
        }
        Cmd::Compare(args) => {
            let report = if let Some(table_path) = &args.table {
                let table: BenchmarkTable = experiment::load(table_path)?;
                let baseline = args
                    .baseline_col
                    .as_deref()
                    .ok_or_else(|| anyhow!("--table needs --baseline-col"))?;
                let method = args.method_col.as_deref().ok_or_else(|| anyhow!("--table needs --method-col"))?;
                experiment::compare_methods(&table, baseline, method)?
            } else {
                let baseline = errors_from_file(args.baseline.as_ref().expect("clap enforces"))?;
                let method = errors_from_file(args.method.as_ref().expect("clap enforces"))?;
                if baseline.len() != method.len() {
                    bail!("baseline has {} folds, method has {}", baseline.len(), method.len());
                }
                let labels = (0..baseline.len()).map(|i| i.to_string()).collect();
                ComparisonReport::new(labels, baseline, method)?
            };
            print!("{}", report.to_csv());
            println!("p_value={}", report.wilcoxon.p_value);
            if let Some(csv) = &args.csv {
                ensure_dir(csv.parent().unwrap_or(Path::new(".")))?;
                write_text(csv, &report.to_csv())?;
            }
        }
        Cmd::Calibrate(args) => {
            let cfg = load_config(&args.config)?;
            let outcome = experiment::calibrate(&cfg)?;
            ensure_dir(&dir)?;
            let path = dir.join("calibration.json");
            experiment::persist(&outcome, &path)?;
            println!(
                "lambda_u={:.6} lambda_phi_bound={:.6} (l_fm={:.6}, l_sfm={:.6}, l_phi={:.6}, window {}..{})",
                outcome.lambda_u,
                outcome.lambda_phi_bound,
                outcome.estimate.l_fm,
                outcome.estimate.l_sfm,
                outcome.estimate.l_phi,
                outcome.estimate.window.0,
                outcome.estimate.window.1
            );
            println!("wrote {}", path.display());
        }
        Cmd::ExportPlots(args) => {
            let text = std::fs::read_to_string(&args.input)
                .with_context(|| format!("reading {}", args.input.display()))?;
            ensure_dir(&dir)?;
            let stem = args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
            if let Ok(sweep) = serde_json::from_str::<SweepTable>(&text) {
                let path = dir.join(format!("{stem}.csv"));
                write_text(&path, &sweep.to_csv())?;
                println!("wrote {}", path.display());
            } else if let Ok(table) = serde_json::from_str::<BenchmarkTable>(&text) {
                let mut csv = String::from("fold");
                for v in &table.variant_names {
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
                for (i, row) in table.cells.iter().enumerate() {
                    csv.push_str(&table.fold_seeds[i].to_string());
                    for cell in row {
                        match cell {
                            CellOutcome::Completed { result } => csv.push_str(&format!(",{}", result.last_error)),
                            CellOutcome::Failed { .. } => csv.push_str(",failed"),
                        }
                    }
                    csv.push('\n');
                }
                let path = dir.join(format!("{stem}.csv"));
                write_text(&path, &csv)?;
                println!("wrote {}", path.display());
            } else if let Ok(result) = serde_json::from_str::<RunResult>(&text) {
                let mut csv =
                    String::from("step,test_error,coverage,purity,mean_weight,loss_sup,loss_unsup,loss_phi\n");
                for c in &result.checkpoints {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        c.step,
                        c.test_error,
                        c.coverage,
                        c.purity.map_or("NA".into(), |p| p.to_string()),
                        c.mean_weight,
                        c.loss_sup,
                        c.loss_unsup,
                        c.loss_phi
                    ));
                }
                let path = dir.join(format!("{stem}.csv"));
                write_text(&path, &csv)?;
                println!("wrote {}", path.display());
            } else {
                bail!("{} is not a sweep table, benchmark table or run result", args.input.display());
            }
        }
    }
    Ok(())
}

/// Runs `f` inside a rayon pool of the requested width.
fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> semisup::Result<T> + Send) -> anyhow::Result<T> {
    let result = match jobs {
        None => f()?,
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| anyhow!("building thread pool: {e}"))?
            .install(f)?,
    };
    Ok(result)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version requests to stdout with success.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
