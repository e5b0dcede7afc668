use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taskdistill::compress::{complexity, make_student_arch};
use taskdistill::data::{self, make_transfer_set, Source, CLASS_COUNT};
use taskdistill::distill::{capture_soft_targets, load_cache, save_cache};
use taskdistill::harness::{
    normalized_curves, read_results, report_csv, run_grid_logged, size_at_threshold, write_results,
    CellRecord, GridResult, GridSpec, RESULTS_FILE,
};
use taskdistill::nn::{file_fingerprint, load_model, save_model, ModelArch};
use taskdistill::train::{
    evaluate_with, train_student_with, train_teacher_with, EvalMode, Progress, TrainConfig,
};
use taskdistill::{Dataset64, Error, Model64};

#[derive(Parser)]
#[command(name = "taskdistill", version, about = "Task-specified knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher on the full training split.
    TrainTeacher(TrainTeacherArgs),
    /// Capture teacher soft targets over an m-class transfer set.
    Capture(CaptureArgs),
    /// Train a compressed student from a teacher and its soft targets.
    Distill(DistillArgs),
    /// Sweep compression rate × subset size.
    Grid(GridArgs),
    /// Minimal rate per subset size meeting an accuracy-retention threshold.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_parser = parse_source)]
    dataset: Source,
    /// Directory holding the standard dataset files.
    #[arg(long)]
    data_dir: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Teacher architecture, e.g. `mnist:20-50-500-10:k5` (default: the dataset preset).
    #[arg(long, value_parser = parse_arch)]
    arch: Option<ModelArch>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct CaptureArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    subset_size: usize,
    #[arg(long, default_value_t = 3.0)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    rate: f64,
    #[arg(long)]
    subset_size: usize,
    #[arg(long)]
    lambda: Option<f64>,
    /// Defaults to the temperature stored in the cache.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Argmax over all classes instead of the task classes.
    #[arg(long)]
    unmasked: bool,
    /// Also write a one-row results CSV.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated, must include 1.0.
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    rates: String,
    /// A range `a..b` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "2..10")]
    subsets: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Teacher architecture, e.g. `mnist:20-50-500-10:k5` (default: the dataset preset).
    #[arg(long, value_parser = parse_arch)]
    arch: Option<ModelArch>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Student epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Students per cell; accuracies are averaged.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Grid output directory (or a results CSV).
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 0.998)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_source(s: &str) -> Result<Source, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_arch(s: &str) -> Result<ModelArch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_rates(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad rate {t:?}: {e}")))
        .collect()
}

fn parse_subsets(s: &str) -> Result<Vec<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad subset size {t:?}: {e}"));
    match s.split_once("..") {
        Some((a, b)) => Ok((num(a)?..=num(b.trim_start_matches('='))?).collect()),
        None => s.split(',').map(num).collect(),
    }
}

/// Wraps the library error with the process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Training { .. } => 3,
            e if e.is_data_error() => 2,
            Error::CacheMiss(_) | Error::TaskSubsetViolation { .. } | Error::Analysis(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("I/O error on {}: {e}", path.display()),
    }
}

fn load_data(args: &DataArgs) -> Result<(Dataset64, Dataset64), Failure> {
    Ok(data::load(args.dataset, &args.data_dir)?)
}

fn config(source: Source, seed: u64, epochs: Option<usize>, lr: Option<f64>, batch: Option<usize>) -> TrainConfig {
    let base = TrainConfig::for_source(source);
    TrainConfig {
        seed,
        epochs: epochs.unwrap_or(base.epochs),
        learning_rate: lr.unwrap_or(base.learning_rate),
        batch_size: batch.unwrap_or(base.batch_size),
        ..base
    }
}

fn teacher_arch(source: Source) -> ModelArch {
    match source {
        Source::Mnist => ModelArch::mnist_teacher(),
        Source::Cifar10 => ModelArch::cifar10_teacher(),
    }
}

fn train_teacher_cmd(a: TrainTeacherArgs) -> Result<(), Failure> {
    let cfg = config(a.data.dataset, a.seed, a.epochs, a.lr, a.batch_size);
    let (train, test) = load_data(&a.data)?;
    let all: Vec<usize> = (0..CLASS_COUNT).collect();
    let mut progress = Progress::new().evaluate_on(&test, &all).print_to(io::stdout());
    let arch = a.arch.unwrap_or_else(|| teacher_arch(a.data.dataset));
    let model = train_teacher_with(arch, &train, &cfg, &mut progress)?;
    save_model(&model, &a.out)?;
    Ok(())
}

fn capture_cmd(a: CaptureArgs) -> Result<(), Failure> {
    let teacher: Model64 = load_model(&a.teacher)?;
    let (train, _) = load_data(&a.data)?;
    let transfer = make_transfer_set(&train, a.subset_size)?;
    let cache = capture_soft_targets(&teacher, &transfer, a.tau)?;
    cache.ensure_teacher(file_fingerprint(&a.teacher)?)?;
    save_cache(&cache, &a.out)?;
    println!("captured {} rows at tau={} into {}", cache.len(), a.tau, a.out.display());
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> Result<(), Failure> {
    let teacher: Model64 = load_model(&a.teacher)?;
    let cache = load_cache::<f64>(&a.cache)?;
    cache.ensure_teacher(file_fingerprint(&a.teacher)?)?;
    let (train, test) = load_data(&a.data)?;
    let base = config(a.data.dataset, a.seed, a.epochs, a.lr, a.batch_size);
    let cfg = TrainConfig {
        tau: a.tau.unwrap_or(cache.tau()),
        lambda: a.lambda.unwrap_or(base.lambda),
        ..base
    };
    let transfer = make_transfer_set(&train, a.subset_size)?;
    let plan = make_student_arch(teacher.arch(), a.rate)?;
    let mut progress = Progress::new()
        .evaluate_on(&test, transfer.classes())
        .print_to(io::stdout());
    let start = std::time::Instant::now();
    let student = train_student_with(plan.student_arch.clone(), &transfer, &cache, &cfg, &mut progress)?;
    drop(progress);
    save_model(&student, &a.out)?;
    let mode = if a.unmasked { EvalMode::Unmasked } else { EvalMode::Masked };
    let eval = evaluate_with(&student, &test, transfer.classes(), mode)?;
    let cx = complexity(&plan.student_arch);
    println!(
        "student={} task_acc={:.6} cp_conv={} cp_fc={} mac_count={}",
        plan.student_arch, eval.accuracy, cx.cp_conv, cx.cp_fc, cx.mac_count
    );
    if let Some(path) = &a.results {
        let cell = CellRecord {
            dataset: a.data.dataset,
            rate: a.rate,
            subset_size: a.subset_size,
            task_accuracy: Some(eval.accuracy),
            baseline_accuracy: None,
            normalized_accuracy: None,
            cp_conv: cx.cp_conv,
            cp_fc: cx.cp_fc,
            mac_count: cx.mac_count,
            seed: cfg.seed,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        write_results(path, &GridResult::from_cells(a.data.dataset, vec![cell]))?;
    }
    Ok(())
}

fn grid_cmd(a: GridArgs) -> Result<(), Failure> {
    let mut spec = GridSpec::new(a.data.dataset, &a.out_dir).with_seed(a.seed);
    let usage = |message: String| Failure { code: 1, message };
    spec.rates = parse_rates(&a.rates).map_err(usage)?;
    spec.subset_sizes = parse_subsets(&a.subsets).map_err(usage)?;
    if let Some(arch) = a.arch {
        spec.teacher_arch = arch;
    }
    spec.jobs = a.jobs;
    spec.repeats = a.repeats;
    spec.cfg = TrainConfig {
        lambda: a.lambda.unwrap_or(spec.cfg.lambda),
        tau: a.tau.unwrap_or(spec.cfg.tau),
        ..config(a.data.dataset, a.seed, a.epochs, a.lr, a.batch_size)
    };
    spec.teacher_cfg = config(a.data.dataset, a.seed, a.teacher_epochs, a.lr, a.batch_size);
    spec.validate()?;
    let (train, test) = load_data(&a.data)?;
    let mut out = io::stdout();
    let result = run_grid_logged(&spec, &train, &test, &mut out)?;
    let failed = result.cells.iter().filter(|c| c.is_failed()).count();
    println!(
        "wrote {} ({} cells, {failed} failed)",
        a.out_dir.join(RESULTS_FILE).display(),
        result.cells.len()
    );
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<(), Failure> {
    let path = if a.grid.is_dir() { a.grid.join(RESULTS_FILE) } else { a.grid.clone() };
    let result = read_results(&path)?;
    let estimates = size_at_threshold(&normalized_curves(&result)?, a.threshold)?;
    let bytes = report_csv(result.dataset, &estimates)?;
    let mut f = BufWriter::new(File::create(&a.out).map_err(|e| io_failure(&a.out, e))?);
    f.write_all(&bytes)
        .and_then(|_| f.flush())
        .map_err(|e| io_failure(&a.out, e))?;
    io::stdout()
        .write_all(&bytes)
        .map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::TrainTeacher(a) => train_teacher_cmd(a),
        Command::Capture(a) => capture_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Grid(a) => grid_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
