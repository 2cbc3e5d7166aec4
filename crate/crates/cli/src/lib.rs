//! Command-line driver. [`run`] parses arguments, executes one command and
//! maps the outcome to an exit code: 0 on success, 1 on usage, contract or
//! format errors, 2 when a verification fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ccs_core::dataset::{generate_dataset, GeneratorConfig, Manifest, Scene, Split};
use ccs_core::gradcheck::{run_suite, TOLERANCE};
use ccs_core::metrics::{evaluate, DistanceReport, DistanceSplit, MaskMode};
use ccs_core::model::{Centers, Model};
use ccs_core::trainer::{Checkpoint, TrainConfig, Trainer, LOG_HEADER, PRESETS};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPRO_FILE: &str = "repro.txt";

#[derive(Parser, Debug)]
#[command(name = "ccsseg", version, about = "Class-center similarity segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and val scenes with their manifests.
    GenData(GenData),
    /// Train a model on a generated dataset.
    ///
    /// Settings resolve in increasing precedence: preset, --config file,
    /// --set pairs, then the dedicated flags (--seed, --iters, --lr,
    /// --batch-size, --workers).
    Train(Train),
    /// Evaluate a checkpoint; prints `class,iou` rows then `miou,acc`.
    Eval(Eval),
    /// Evaluate with the predicted mask replaced by the ground-truth mask.
    EvalUpperBound(Eval),
    /// Run the finite-difference gradient suite.
    Gradcheck(Gradcheck),
    /// Export pixel-to-center distance histograms for a checkpoint.
    AnalyzeDistances(Analyze),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Scene height and width.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// How far the confusable pair's colors converge within a scene, in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    hardness: f64,
    /// Standard deviation of per-pixel color noise.
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
}

#[derive(Args, Debug)]
struct Train {
    /// Dataset directory holding `train.tsv`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint, log and config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Ablation row used as the starting configuration.
    #[arg(long, default_value = "ccsnet", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: String,
    /// `key = value` file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed for initialization, batch order and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Total iterations (`max_iters`).
    #[arg(long)]
    iters: Option<usize>,
    /// Base learning rate (`base_lr`).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Worker threads; results are identical for any count.
    #[arg(long)]
    workers: Option<usize>,
    /// Stop and checkpoint after this many completed iterations.
    #[arg(long)]
    stop_at: Option<usize>,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long, conflicts_with_all = ["config", "set", "seed", "iters", "lr", "batch_size"])]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Also write `metrics.csv` and the run record here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Random instances per case.
    #[arg(long, default_value_t = ccs_core::gradcheck::SUITE_SEEDS)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Analyze {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long, default_value_t = 0.01)]
    sample_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also dump every sampled distance.
    #[arg(long)]
    samples: bool,
}

#[derive(Debug)]
enum Failure {
    Core(ccs_core::Error),
    Verification(String),
}

impl From<ccs_core::Error> for Failure {
    fn from(e: ccs_core::Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let line = render_command(&argv);
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a, &line),
        Command::Train(a) => train(a, &line),
        Command::Eval(a) => eval(a, MaskMode::Predicted, &line),
        Command::EvalUpperBound(a) => eval(a, MaskMode::GroundTruth, &line),
        Command::Gradcheck(a) => gradcheck(a, &line),
        Command::AnalyzeDistances(a) => analyze(a, &line),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("error: verification failed: {msg}");
            2
        }
    }
}

fn render_command(argv: &[OsString]) -> String {
    argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ccs_core::Error + '_ {
    move |source| ccs_core::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ccs_core::Error> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), ccs_core::Error> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Run record: the invocation, seeds, artifact version and a timestamp.
/// Timestamps live only here, so every other output is byte-stable.
fn repro_record(command: &str, seed: Option<u64>, config: Option<&str>) -> String {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "command = {command}");
    if let Some(seed) = seed {
        let _ = writeln!(s, "seed = {seed}");
    }
    let _ = writeln!(s, "timestamp = {stamp}");
    if let Some(c) = config {
        s.push_str("[config]\n");
        s.push_str(c);
    }
    s
}

fn emit_repro(out: Option<&Path>, record: &str) -> Result<(), ccs_core::Error> {
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join(REPRO_FILE), record)
        }
        None => {
            for line in record.lines() {
                eprintln!("# {line}");
            }
            Ok(())
        }
    }
}

fn gen_data(a: GenData, line: &str) -> Outcome {
    let cfg = GeneratorConfig {
        classes: a.classes,
        height: a.size,
        width: a.size,
        hardness: a.hardness,
        noise: a.noise,
    };
    create_dir(&a.out)?;
    generate_dataset(&a.out, &cfg, a.seed, a.train, a.val)?;
    let settings = format!(
        "classes = {}\nsize = {}\nhardness = {}\nnoise = {}\ntrain = {}\nval = {}\n",
        a.classes, a.size, a.hardness, a.noise, a.train, a.val
    );
    emit_repro(Some(&a.out), &repro_record(line, Some(a.seed), Some(&settings)))?;
    println!("wrote {} train and {} val scenes to {}", a.train, a.val, a.out.display());
    Ok(())
}

fn resolve_config(a: &Train) -> Result<TrainConfig, ccs_core::Error> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        cfg.apply_text(&fs::read_to_string(path).map_err(io_err(path))?)?;
    }
    for pair in &a.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ccs_core::Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(data: &Path, split: Split, classes: usize) -> Result<Vec<Scene>, ccs_core::Error> {
    Manifest::load(&data.join(format!("{}.tsv", split.name())), split)?.read_scenes(classes)
}

fn train(a: Train, line: &str) -> Outcome {
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if let Some(w) = a.workers {
                t.set_workers(w)?;
            }
            t
        }
        None => Trainer::new(resolve_config(&a)?)?,
    };
    let cfg = trainer.config().clone();
    let scenes = load_split(&a.data, Split::Train, cfg.classes)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("config.txt"), &cfg.to_text())?;
    emit_repro(Some(&a.out), &repro_record(line, Some(cfg.seed), Some(&cfg.to_text())))?;

    let log_path = a.out.join(LOG_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(trainer.iteration() > 0)
        .write(true)
        .truncate(trainer.iteration() == 0)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let (interval, max) = (cfg.log_interval, cfg.max_iters);
    let until = a.stop_at.unwrap_or(max).min(max);
    let empty = log.metadata().map_err(io_err(&log_path))?.len() == 0;
    if empty {
        writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
    }
    let result = trainer.run_until(&scenes, until, |step| {
        if step.iter % interval == 0 || step.iter == max {
            writeln!(log, "{}", step.csv_row()).map_err(io_err(&log_path))?;
        }
        Ok(())
    });
    // Keep what was learned even when a later step diverges.
    trainer.checkpoint().save(&a.out.join(CHECKPOINT_FILE))?;
    let logs = result?;
    if let Some(last) = logs.last() {
        println!("iter {} total {:.6} acc {:.4}", last.iter, last.losses.total, last.acc);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(TrainConfig, Model), ccs_core::Error> {
    Checkpoint::load(path)?.model()
}

fn eval(a: Eval, mode: MaskMode, line: &str) -> Outcome {
    let (cfg, model) = load_model(&a.checkpoint)?;
    if mode == MaskMode::GroundTruth && cfg.prediction_centers != Centers::Adaptive {
        return Err(ccs_core::Error::Config("the upper bound needs a checkpoint that predicts with adaptive centers".into()).into());
    }
    let scenes = load_split(&a.data, a.split.into(), cfg.classes)?;
    let csv = evaluate(&model, cfg.prediction_centers, &scenes, mode)?.to_csv()?;
    print!("{csv}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("metrics.csv"), &csv)?;
    }
    emit_repro(a.out.as_deref(), &repro_record(line, Some(cfg.seed), Some(&cfg.to_text())))?;
    Ok(())
}

fn gradcheck(a: Gradcheck, line: &str) -> Outcome {
    let reports = run_suite(a.seeds)?;
    let mut csv = String::from("case,max_rel_error\n");
    for r in &reports {
        let _ = writeln!(csv, "{},{:e}", r.name, r.max_error);
    }
    print!("{csv}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("gradcheck.csv"), &csv)?;
    }
    emit_repro(a.out.as_deref(), &repro_record(line, None, None))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} above {TOLERANCE:e}", failed.join(", "))))
    }
}

fn analyze(a: Analyze, line: &str) -> Outcome {
    let (cfg, model) = load_model(&a.checkpoint)?;
    let scenes = load_split(&a.data, a.split.into(), cfg.classes)?;
    let report = DistanceReport::compute(&model, &scenes, a.sample_ratio, a.seed)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    create_dir(&a.out)?;
    write_file(&a.out.join("histogram_intra.csv"), &report.histogram_csv(DistanceSplit::Intra))?;
    write_file(&a.out.join("histogram_inter.csv"), &report.histogram_csv(DistanceSplit::Inter))?;
    let medians = report.medians_csv();
    write_file(&a.out.join("medians.csv"), &medians)?;
    if a.samples {
        write_file(&a.out.join("samples.csv"), &report.samples_csv())?;
    }
    print!("{medians}");
    emit_repro(Some(&a.out), &repro_record(line, Some(a.seed), Some(&cfg.to_text())))?;
    Ok(())
}
