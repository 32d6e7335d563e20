//! Command-line front end: dataset synthesis, label building, training,
//! evaluation, the gradient-check suite, the attention cost benchmark and
//! model size summaries. Exit codes: 0 success, 1 contract failure, 2 I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use focalseg::data::{self, DatasetSpec};
use focalseg::labels::HeatmapCompose;
use focalseg::model::{Model, ModelConfig};
use focalseg::train::{self, Precision, RunConfig};
use focalseg::{bench, gradcheck, Error, Tape};

#[derive(Parser)]
#[command(
    name = "focalseg",
    about = "Window-attention segmentation workbench",
    long_about = "Window-attention segmentation workbench.\n\n\
        All compute is single-threaded and seed-deterministic. The \
        FOCALSEG_THREADS environment variable caps worker parallelism; the \
        engine uses one worker, so any cap >= 1 is honored as-is.",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ComposeArg {
    Max,
    SumClip,
}

impl From<ComposeArg> for HeatmapCompose {
    fn from(c: ComposeArg) -> Self {
        match c {
            ComposeArg::Max => HeatmapCompose::Max,
            ComposeArg::SumClip => HeatmapCompose::SumClip,
        }
    }
}

/// Flags shared by the commands that read or write run configuration.
#[derive(Args)]
struct ConfigFlags {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Force bit-reproducible execution. The engine is always deterministic;
    /// the flag exists so scripts can state the requirement explicitly.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a phantom dataset: images, masks, heatmaps, split manifest.
    MakeDataset {
        #[command(flatten)]
        cfg: ConfigFlags,
        /// Output dataset directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Override the config's case count.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Rebuild every boundary heatmap of an existing dataset from its masks.
    MakeLabels {
        /// Dataset directory to rewrite in place.
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Gaussian decay width, in pixels.
        #[arg(long, value_name = "X", default_value_t = 1.6)]
        sigma: f64,
        /// Rule for combining per-contour-point Gaussians.
        #[arg(long, value_enum, default_value_t = ComposeArg::Max)]
        compose: ComposeArg,
    },
    /// Train a model; writes checkpoints, a config echo and a CSV log.
    Train {
        #[command(flatten)]
        cfg: ConfigFlags,
        /// Override the config's dataset directory.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Override the heatmap-loss weight; 0 disables the auxiliary task.
        #[arg(long, value_name = "X")]
        lambda2: Option<f64>,
        /// Arithmetic width for the training run.
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
    },
    /// Evaluate a checkpoint on a dataset split; emits per-case CSV.
    Eval {
        /// Run directory holding config.json and checkpoints.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Checkpoint tag: best, last, epoch1.
        #[arg(long, value_name = "TAG", default_value = "best")]
        checkpoint: String,
        /// Dataset split to score.
        #[arg(long, value_name = "NAME", default_value = "test")]
        split: String,
        /// Override the dataset directory recorded in the run config.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// Pixel spacing used for the hd95_mm column.
        #[arg(long, value_name = "MM", default_value_t = 1.0)]
        spacing_mm: f64,
        /// Write the CSV here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Dump per-window attention matrices for the split's first case
        /// into this directory, one CSV per transformer block.
        #[arg(long, value_name = "DIR")]
        dump_attn: Option<PathBuf>,
    },
    /// Check every operation's analytic gradients against central
    /// differences, then a composed toy model; nonzero exit on any failure.
    Gradcheck {
        /// Number of random seeds to sweep.
        #[arg(long, value_name = "N", default_value_t = 10)]
        seeds: u64,
        /// Relative-error tolerance.
        #[arg(long, value_name = "X", default_value_t = 1e-4)]
        tol: f64,
        /// Skip the composed-model check (operations only).
        #[arg(long)]
        ops_only: bool,
    },
    /// Time windowed attention against dense global attention.
    BenchAttn {
        /// Comma-separated token-map sides.
        #[arg(long, value_name = "LIST", default_value = "14,28,56", value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, value_name = "N", default_value_t = 32)]
        dim: usize,
        #[arg(long, value_name = "N", default_value_t = 2)]
        heads: usize,
        #[arg(long, value_name = "N", default_value_t = 7)]
        window: usize,
        /// Timed repetitions per route; the median is reported.
        #[arg(long, value_name = "N", default_value_t = 20)]
        reps: usize,
        #[arg(long, value_name = "N", default_value_t = 17)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Parameter-count tables for the built-in model presets.
    Summary {
        /// Presets to report: desk, full48, full64.
        #[arg(long, value_name = "LIST", default_value = "desk,full48,full64", value_delimiter = ',')]
        presets: Vec<String>,
    },
}

fn threads_cap() -> Result<(), Error> {
    match std::env::var("FOCALSEG_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()), // single worker, any cap >= 1 holds
            _ => Err(Error::Parameter(format!(
                "FOCALSEG_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_make_dataset(
    cfg: ConfigFlags,
    out: PathBuf,
    count: Option<usize>,
    force: bool,
) -> Result<(), Error> {
    let mut spec: DatasetSpec = match &cfg.config {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = cfg.seed {
        spec.phantom.seed = s;
    }
    if let Some(c) = count {
        spec.count = c;
    }
    if out.exists() && fs::read_dir(&out)?.next().is_some() && !force {
        return Err(Error::Parameter(format!(
            "{} exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let sizes = data::write_dataset(&out, &spec)?;
    println!(
        "wrote {} cases to {} (train/val/test = {}/{}/{})",
        spec.count,
        out.display(),
        sizes[0],
        sizes[1],
        sizes[2]
    );
    Ok(())
}

fn cmd_train(
    cfg: ConfigFlags,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    lambda2: Option<f64>,
    precision: Option<PrecisionArg>,
) -> Result<(), Error> {
    let mut rc: RunConfig = match &cfg.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cfg.seed {
        rc.seed = s;
    }
    if let Some(d) = dataset {
        rc.dataset = d;
    }
    if let Some(o) = out {
        rc.out = o;
    }
    if let Some(l2) = lambda2 {
        rc.loss.lambda2 = l2;
    }
    if let Some(p) = precision {
        rc.precision = p.into();
    }
    println!("{}", train::LOG_HEADER);
    let outcome = train::train_with(&rc, |row| println!("{}", row.csv()))?;
    println!(
        "best epoch {} (val dsc {:.4}); artifacts in {}",
        outcome.best_epoch,
        outcome.best_val_dsc,
        rc.out.display()
    );
    Ok(())
}

fn cmd_eval(
    run: PathBuf,
    checkpoint: String,
    split: String,
    dataset: Option<PathBuf>,
    spacing_mm: f64,
    out: Option<PathBuf>,
    dump_attn: Option<PathBuf>,
) -> Result<(), Error> {
    let (rc, model) = train::load_checkpoint(&run, &checkpoint)?;
    let dir = dataset.unwrap_or(rc.dataset);
    let samples = data::load_split(&dir, &split)?;
    if samples.is_empty() {
        return Err(Error::Parameter(format!("split {split:?} of {} is empty", dir.display())));
    }
    if let Some(attn_dir) = dump_attn {
        dump_attention(&model, &samples[0], &attn_dir)?;
    }
    let rows = train::evaluate(&model, &samples)?;
    write_text(out.as_deref(), &train::eval_csv(&rows, spacing_mm))
}

/// One CSV per transformer block: attention rows for every (window, head,
/// query) triple of the given sample.
fn dump_attention(model: &Model<f32>, sample: &data::Sample, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut tp = Tape::<f32>::new();
    let params = model.leaves(&mut tp, false);
    let x = tp.constant(sample.image.clone());
    let out = model.forward(&mut tp, &params, x)?;
    for (name, var) in &out.attn {
        let t = tp.value(*var);
        let [rows, cols] = *t.shape() else {
            return Err(Error::dim("dump_attention", format!("{:?}", t.shape())));
        };
        let mut csv = String::new();
        for r in 0..rows {
            let row: Vec<String> =
                (0..cols).map(|c| format!("{:.6}", t.data()[r * cols + c])).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        fs::write(dir.join(format!("{name}.csv")), csv)?;
    }
    println!("dumped {} attention maps for {} to {}", out.attn.len(), sample.id, dir.display());
    Ok(())
}

fn cmd_gradcheck(seeds: u64, tol: f64, ops_only: bool) -> Result<(), Error> {
    if seeds == 0 {
        return Err(Error::Parameter("need at least one seed".into()));
    }
    println!("{:<28} {:>12} {:>8}", "operation", "max_rel_err", "status");
    let mut failures = 0usize;
    let mut op_worst: Vec<(String, f64)> = Vec::new();
    for seed in 0..seeds {
        for (name, report) in gradcheck::op_suite(seed)? {
            match op_worst.iter_mut().find(|(n, _)| n == name) {
                Some((_, m)) => *m = m.max(report.max_rel),
                None => op_worst.push((name.to_string(), report.max_rel)),
            }
        }
    }
    for (name, max_rel) in &op_worst {
        let ok = *max_rel <= tol;
        failures += usize::from(!ok);
        println!("{name:<28} {max_rel:>12.3e} {:>8}", if ok { "pass" } else { "FAIL" });
    }
    if !ops_only {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(gradcheck::composed_model_check(seed, Some(6))?.max_rel);
        }
        let ok = worst <= tol;
        failures += usize::from(!ok);
        println!("{:<28} {worst:>12.3e} {:>8}", "composed_model", if ok { "pass" } else { "FAIL" });
    }
    if failures > 0 {
        return Err(Error::Numeric(format!(
            "{failures} gradient check(s) exceeded tolerance {tol:.1e}"
        )));
    }
    println!("all gradient checks passed at tolerance {tol:.1e} over {seeds} seed(s)");
    Ok(())
}

fn cmd_bench(
    sizes: Vec<usize>,
    cfg: bench::BenchConfig,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let report = bench::run(&sizes, &cfg)?;
    eprintln!(
        "cross-check max |focal - dense| = {:.3e} (tolerance {:.0e}); median of {} reps",
        report.crosscheck_max_abs,
        bench::CROSSCHECK_TOL,
        report.reps
    );
    write_text(out.as_deref(), &report.csv())
}

fn preset(name: &str) -> Result<ModelConfig, Error> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "full48" => Ok(ModelConfig::full_scale(48)),
        "full64" => Ok(ModelConfig::full_scale(64)),
        other => Err(Error::Parameter(format!(
            "unknown preset {other:?}; expected desk, full48 or full64"
        ))),
    }
}

fn cmd_summary(presets: Vec<String>) -> Result<(), Error> {
    let mut totals: Vec<(String, usize)> = Vec::new();
    for name in &presets {
        let cfg = preset(name)?;
        let model = Model::<f32>::new(cfg.clone(), 0)?;
        println!(
            "preset {name}: input {}x{}, embed {}, depths {:?}",
            cfg.input[0], cfg.input[1], cfg.embed_dim, cfg.depths
        );
        println!("  {:<20} {:>12}", "module", "parameters");
        for (group, count) in model.store.grouped_counts() {
            println!("  {group:<20} {count:>12}");
        }
        println!("  {:<20} {:>12}", "total", model.param_count());
        totals.push((name.clone(), model.param_count()));
    }
    if let (Some(a), Some(b)) = (
        totals.iter().find(|(n, _)| n == "full48"),
        totals.iter().find(|(n, _)| n == "full64"),
    ) {
        println!("full64/full48 parameter ratio: {:.3}", b.1 as f64 / a.1 as f64);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    threads_cap()?;
    match cli.cmd {
        Cmd::MakeDataset { cfg, out, count, force } => cmd_make_dataset(cfg, out, count, force),
        Cmd::MakeLabels { dataset, sigma, compose } => {
            let n = data::rebuild_labels(&dataset, sigma, compose.into())?;
            println!("rebuilt {n} heatmaps (sigma {sigma})");
            Ok(())
        }
        Cmd::Train { cfg, dataset, out, lambda2, precision } => {
            cmd_train(cfg, dataset, out, lambda2, precision)
        }
        Cmd::Eval { run, checkpoint, split, dataset, spacing_mm, out, dump_attn } => {
            cmd_eval(run, checkpoint, split, dataset, spacing_mm, out, dump_attn)
        }
        Cmd::Gradcheck { seeds, tol, ops_only } => cmd_gradcheck(seeds, tol, ops_only),
        Cmd::BenchAttn { sizes, dim, heads, window, reps, seed, out } => {
            cmd_bench(sizes, bench::BenchConfig { dim, heads, window, reps, seed }, out)
        }
        Cmd::Summary { presets } => cmd_summary(presets),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // bad usage is a contract violation, not an I/O failure
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version land here
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
