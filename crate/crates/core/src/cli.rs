//! Command-line entry points: dataset synthesis, training, evaluation, the
//! ablation matrix, bias auditing, and the gradient self-check.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, bad config,
//! malformed input file), 2 runtime failure. Every run writes a
//! `manifest.toml` with the resolved configuration into its output
//! directory, and writes nothing outside it.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::audit::{error_histogram, group_report, read_predictions, write_report_files, Grouping, StdConvention};
use crate::data::{generate_dataset, mix_seed, read_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, model_from_checkpoint, Aggregation, RunConfig};
use crate::train::{evaluate, train, write_predictions};

#[derive(Parser)]
#[command(
    name = "agecast",
    version,
    about = "Multi-view age estimation sandbox: synthesize data, train, ablate, audit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV.
    Synth(SynthArgs),
    /// Train a model and write checkpoints, logs and validation predictions.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Run the ablation matrix and write one summary row per cell.
    Ablate(AblateArgs),
    /// Error breakdowns and histogram from a predictions file.
    Bias(BiasArgs),
    /// Check analytic gradients of every loss term against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration TOML; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override: rederives the data, split, optimizer and init
    /// seeds from this one value.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::from_toml(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            apply_root_seed(&mut run, seed);
        }
        Ok(run)
    }
}

/// Derived seeds are masked to 63 bits so configs stay TOML-representable
/// (TOML integers are i64).
fn config_seed(x: u64) -> u64 {
    x & (i64::MAX as u64)
}

fn apply_root_seed(run: &mut RunConfig, seed: u64) {
    run.data.seed = seed;
    run.split.seed = config_seed(mix_seed(seed, 1));
    run.optim.seed = config_seed(mix_seed(seed, 2));
    run.init_seed = config_seed(mix_seed(seed, 3));
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (dataset.csv, manifest.toml).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset CSV; omitted means synthesize from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Views per sample (K).
    #[arg(long)]
    k: Option<usize>,
    /// encoder | average-pool | none
    #[arg(long)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    k_eval: Option<usize>,
    /// Shrink to a seconds-scale smoke configuration.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k_eval: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Seeds per cell; the summary reports the median MAE.
    #[arg(long)]
    seeds: Option<usize>,
    /// Shrink every cell for CI.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct BiasArgs {
    /// Predictions CSV written by `train` or `eval`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// age-range | gender | ethnicity | gender-ethnicity | all
    #[arg(long, default_value = "all")]
    grouping: String,
    #[arg(long, default_value_t = 5.0)]
    age_bin_width: f64,
    /// population | sample
    #[arg(long, default_value = "population")]
    std_convention: String,
    #[arg(long, default_value_t = 1.0)]
    histogram_bin_width: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Parse and run; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Bias(args) => cmd_bias(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } | Error::Contract(_) => 1,
                _ => 2,
            }
        }
    }
}

fn write_manifest(out: &Path, command: &str, run: Option<&RunConfig>, extra: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let as_toml = |e: toml::ser::Error| Error::config(e.to_string());
    let mut meta = toml::value::Table::new();
    meta.insert("tool".into(), toml::Value::String("agecast".into()));
    meta.insert("version".into(), toml::Value::String(env!("CARGO_PKG_VERSION").into()));
    meta.insert("command".into(), toml::Value::String(command.into()));
    meta.insert("checkpoint_format".into(), toml::Value::Integer(1));
    meta.insert("dataset_format".into(), toml::Value::String("csv-sig9".into()));
    for (key, value) in extra {
        meta.insert((*key).into(), toml::Value::String(value.clone()));
    }
    let mut root = toml::value::Table::new();
    root.insert("manifest".into(), toml::Value::Table(meta));
    if let Some(run) = run {
        let value = toml::Value::try_from(run).map_err(as_toml)?;
        root.insert("run".into(), value);
    }
    let doc = toml::to_string_pretty(&toml::Value::Table(root)).map_err(as_toml)?;
    std::fs::write(out.join("manifest.toml"), doc)?;
    Ok(())
}

fn load_or_generate(data: &Option<PathBuf>, run: &RunConfig) -> Result<Dataset> {
    match data {
        Some(path) => read_dataset(path),
        None => generate_dataset(&run.data),
    }
}

fn apply_quick(run: &mut RunConfig) {
    run.data.n_subjects = 150;
    run.data.samples_per_subject = 2;
    run.encoder.model_dim = 16;
    run.encoder.ffn_dim = 32;
    run.encoder.num_layers = 2;
    run.encoder.num_heads = 2;
    run.optim.epochs = 3;
    run.eval_every = 0;
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let run = args.config.load()?;
    let dataset = generate_dataset(&run.data)?;
    std::fs::create_dir_all(&args.out)?;
    write_dataset(&dataset, &args.out.join("dataset.csv"))?;
    write_manifest(&args.out, "synth", Some(&run), &[])?;
    println!(
        "wrote {} samples ({} subjects, F={}) to {}",
        dataset.len(),
        run.data.n_subjects,
        run.data.feature_dim,
        args.out.join("dataset.csv").display()
    );
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut run = args.config.load()?;
    if args.quick {
        apply_quick(&mut run);
    }
    if let Some(epochs) = args.epochs {
        run.optim.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        run.optim.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        run.optim.base_lr = lr;
    }
    if let Some(k) = args.k {
        run.encoder.num_views = k;
    }
    if let Some(aggregation) = args.aggregation {
        run.aggregation = aggregation;
    }
    if let Some(k_eval) = args.k_eval {
        run.k_eval = Some(k_eval);
    }
    run.validate()?;

    let dataset = load_or_generate(&args.data, &run)?;
    write_manifest(
        &args.out,
        "train",
        Some(&run),
        &[(
            "data",
            args.data
                .as_ref()
                .map(|p| format!("{:?}", p.display().to_string()))
                .unwrap_or_else(|| "\"synthesized\"".to_string()),
        )],
    )?;
    let outcome = train(&run, &dataset, Some(&args.out))?;
    write_predictions(&args.out.join("predictions_val.csv"), &outcome.final_predictions)?;
    println!(
        "final val MAE {:.4} | best val MAE {:.4} (epoch {})",
        outcome.final_val_mae, outcome.best_val_mae, outcome.best_epoch
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let model = model_from_checkpoint(&checkpoint)?;
    let run = &checkpoint.run;
    let dataset = read_dataset(&args.data)?;
    let k_eval = args.k_eval.unwrap_or_else(|| run.k_eval());
    let seed_root = mix_seed(run.data.seed, 0x5417_0004);
    let (mae, predictions) = evaluate(&model, &dataset, k_eval, &run.augment, seed_root)?;
    write_manifest(
        &args.out,
        "eval",
        Some(run),
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("k_eval_used", k_eval.to_string()),
        ],
    )?;
    write_predictions(&args.out.join("predictions.csv"), &predictions)?;
    println!("MAE {mae:.4} over {} samples", predictions.len());
    Ok(0)
}

struct AblationCell {
    axis: &'static str,
    setting: String,
    run: RunConfig,
}

/// One-factor-at-a-time matrix: view count (with its aggregation pairing),
/// encoder depth, and bin size.
fn ablation_cells(base: &RunConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    let k_axis: [(usize, Aggregation); 7] = [
        (1, Aggregation::NoEncoder),
        (2, Aggregation::Encoder),
        (4, Aggregation::Encoder),
        (6, Aggregation::Encoder),
        (10, Aggregation::Encoder),
        (15, Aggregation::Encoder),
        (10, Aggregation::AveragePool),
    ];
    for (k, aggregation) in k_axis {
        let mut run = base.clone();
        run.encoder.num_views = k;
        run.aggregation = aggregation;
        let setting = match aggregation {
            Aggregation::Encoder => format!("{k}"),
            Aggregation::AveragePool => format!("{k} average-pool"),
            Aggregation::NoEncoder => format!("{k} no-encoder"),
        };
        cells.push(AblationCell {
            axis: "augmentations",
            setting,
            run,
        });
    }
    for layers in [2usize, 4, 8] {
        let mut run = base.clone();
        run.aggregation = Aggregation::Encoder;
        run.encoder.num_layers = layers;
        cells.push(AblationCell {
            axis: "encoder-depth",
            setting: format!("{layers} layers"),
            run,
        });
    }
    let span = base.bins.bin_size * base.bins.count as f64;
    for bin_size in [1.0f64, 5.0, 10.0] {
        let mut run = base.clone();
        run.aggregation = Aggregation::Encoder;
        run.bins.bin_size = bin_size;
        run.bins.count = ((span / bin_size).ceil() as usize).max(2);
        cells.push(AblationCell {
            axis: "bin-size",
            setting: format!("{bin_size}"),
            run,
        });
    }
    cells
}

/// Per-seed reseeding: each repetition regenerates data, split, shuffling
/// and initialization from the cell seed index.
fn reseed(run: &mut RunConfig, seed_index: usize) {
    let tag = 0xAB1A_0000 + seed_index as u64;
    run.data.seed = config_seed(mix_seed(run.data.seed, tag));
    run.split.seed = config_seed(mix_seed(run.split.seed, tag));
    run.optim.seed = config_seed(mix_seed(run.optim.seed, tag));
    run.init_seed = config_seed(mix_seed(run.init_seed, tag));
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Train every (cell, seed) pair. Cells are independent single-threaded
/// runs, so they execute on a small worker pool; results are ordered by
/// task index and therefore deterministic.
fn run_ablation_cells(cells: &[AblationCell], seeds: usize) -> Result<Vec<Vec<f64>>> {
    struct Task {
        cell_index: usize,
        run: RunConfig,
    }
    let mut queue = VecDeque::new();
    for (cell_index, cell) in cells.iter().enumerate() {
        for s in 0..seeds {
            let mut run = cell.run.clone();
            reseed(&mut run, s);
            queue.push_back(Task { cell_index, run });
        }
    }
    let total = queue.len();
    let queue = Mutex::new(queue);
    let results: Mutex<Vec<Vec<f64>>> = Mutex::new(vec![Vec::new(); cells.len()]);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(total)
        .max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = {
                    let mut q = queue.lock().unwrap();
                    match q.pop_front() {
                        Some(t) => t,
                        None => return,
                    }
                };
                let outcome = generate_dataset(&task.run.data)
                    .and_then(|dataset| train(&task.run, &dataset, None));
                match outcome {
                    Ok(o) => results.lock().unwrap()[task.cell_index].push(o.final_val_mae),
                    Err(e) => {
                        let mut slot = first_error.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(e);
                        }
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(results.into_inner().unwrap())
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let mut base = args.config.load()?;
    if args.quick {
        apply_quick(&mut base);
    }
    base.eval_every = 0;
    base.validate()?;
    let seeds = args.seeds.unwrap_or(if args.quick { 2 } else { 5 });
    if seeds == 0 {
        return Err(Error::config("--seeds must be at least 1".to_string()));
    }

    let cells = ablation_cells(&base);
    write_manifest(
        &args.out,
        "ablate",
        Some(&base),
        &[("seeds", seeds.to_string()), ("quick", args.quick.to_string())],
    )?;
    let maes = run_ablation_cells(&cells, seeds)?;

    let mut csv = String::from("setting,mae,axis,aggregation,k,layers,bin_size,n_seeds\n");
    for (cell, cell_maes) in cells.iter().zip(maes) {
        let mut sorted = cell_maes.clone();
        let med = median(&mut sorted);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cell.setting,
            med,
            cell.axis,
            cell.run.aggregation,
            cell.run.encoder.num_views,
            cell.run.encoder.num_layers,
            cell.run.bins.bin_size,
            seeds
        ));
        println!("{:<16} {:<14} median MAE {med:.4}", cell.axis, cell.setting);
    }
    std::fs::write(args.out.join("summary.csv"), csv)?;
    Ok(0)
}

fn cmd_bias(args: BiasArgs) -> Result<i32> {
    let rows = read_predictions(&args.predictions)?;
    let convention = match args.std_convention.as_str() {
        "population" => StdConvention::Population,
        "sample" => StdConvention::Sample,
        other => {
            return Err(Error::config(format!(
                "unknown std convention {other:?} (expected population or sample)"
            )))
        }
    };
    let groupings: Vec<Grouping> = if args.grouping == "all" {
        Grouping::ALL.to_vec()
    } else {
        vec![args.grouping.parse()?]
    };
    write_manifest(
        &args.out,
        "bias",
        None,
        &[
            ("predictions", args.predictions.display().to_string()),
            ("grouping", args.grouping.clone()),
            ("age_bin_width", args.age_bin_width.to_string()),
            ("std_convention", args.std_convention.clone()),
            ("histogram_bin_width", args.histogram_bin_width.to_string()),
        ],
    )?;
    let histogram = error_histogram(&rows, args.histogram_bin_width)?;
    for (i, grouping) in groupings.iter().enumerate() {
        let report = group_report(&rows, *grouping, args.age_bin_width, convention)?;
        write_report_files(&args.out, &report, (i == 0).then_some(&histogram))?;
        println!("{}", report.to_text());
    }
    println!("cumulative |error| fractions:");
    for (t, f) in &histogram.cumulative {
        println!("  <= {t} years: {:.2}%", 100.0 * f);
    }
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    write_manifest(&args.out, "gradcheck", None, &[("seed", args.seed.to_string())])?;
    let results = crate::gradcheck::full_model_gradient_suite(args.seed)?;
    let mut all_ok = true;
    let mut report = String::new();
    for (name, err) in &results {
        let ok = *err < 1e-4;
        all_ok &= ok;
        let line = format!(
            "{name:<14} max relative error {err:.3e} {}",
            if ok { "ok" } else { "FAIL (tolerance 1e-4)" }
        );
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    std::fs::write(args.out.join("gradcheck.txt"), report)?;
    Ok(if all_ok { 0 } else { 1 })
}
