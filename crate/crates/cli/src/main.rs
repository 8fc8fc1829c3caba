use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmvae_core::metrics::{latent_interpolate, latent_traverse, write_frames, EvalReport};
use lmvae_core::train::{run_to_end, Checkpoint, RunConfig, Trainer};
use lmvae_core::vae::VaeExpert;
use lmvae_core::Error;

#[derive(Parser)]
#[command(name = "lmvae", version, about = "Lifelong mixture of VAE experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task of a run config, writing events, eval and checkpoints.
    Train(TrainArgs),
    /// Print evaluation metrics from a checkpoint as CSV.
    Eval(EvalArgs),
    /// Decode frames between the latent means of two test samples.
    Interpolate(InterpolateArgs),
    /// Decode frames sweeping one latent coordinate of a test sample.
    Traverse(TraverseArgs),
    /// Route and classify test samples, one CSV row each.
    Classify(ClassifyArgs),
    /// Print what a checkpoint holds.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue a run from a checkpoint instead of starting from a config.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs per task; overrides per-task settings too.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Only this task's rows; all learned tasks by default.
    #[arg(long)]
    task: Option<usize>,
    /// Re-evaluate instead of printing the stored report.
    #[arg(long)]
    recompute: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    task: usize,
    /// Expert to decode with; defaults to the one that learned the task.
    #[arg(long)]
    expert: Option<usize>,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value = "frames")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    common: SampleArgs,
    #[arg(long, default_value_t = 0)]
    from: usize,
    #[arg(long, default_value_t = 1)]
    to: usize,
}

#[derive(Args)]
struct TraverseArgs {
    #[command(flatten)]
    common: SampleArgs,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true,
          default_values_t = [-3.0, 3.0])]
    range: Vec<f64>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: Option<usize>,
    /// CSV destination; stdout by default.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Traverse(a) => traverse(a),
        Command::Classify(a) => classify(a),
        Command::InspectCheckpoint(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("lmvae: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("lmvae: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::Config(format!("cannot read {}: {io}", path.display())),
        e => e.into(),
    })
}

fn train(a: TrainArgs) -> CliResult {
    let mut trainer = match (&a.config, &a.resume) {
        (Some(path), _) => {
            let mut cfg = load_config(path)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            if let Some(epochs) = a.epochs {
                cfg.training.epochs = epochs;
                cfg.tasks.iter_mut().for_each(|t| t.epochs = None);
            }
            if let Some(dir) = a.output_dir {
                cfg.output_dir = Some(dir);
            }
            cfg.validate()?;
            let tasks = cfg.resolve_tasks()?;
            Trainer::new(cfg, tasks)?
        }
        (None, Some(ckpt)) => {
            if a.seed.is_some() || a.epochs.is_some() {
                return Err(Failure::Config(
                    "--seed and --epochs cannot change a resumed run".into(),
                ));
            }
            let mut ckpt = load_checkpoint(ckpt)?;
            if let Some(dir) = a.output_dir {
                ckpt.config.output_dir = Some(dir);
            }
            let tasks = ckpt.config.resolve_tasks()?;
            ckpt.into_trainer(tasks)?
        }
        (None, None) => unreachable!("clap requires --config or --resume"),
    };
    if trainer.config().output_dir.is_none() {
        return Err(Failure::Config(
            "no output directory: set output_dir in the config or pass --output-dir".into(),
        ));
    }
    run_to_end(&mut trainer)?;
    trainer.audit()?;
    if let Some(r) = trainer.reports().last() {
        print!("{}", r.summary());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::Runtime(format!("cannot read {}: {io}", path.display())),
        e => e.into(),
    })
}

fn restore(path: &Path) -> Result<Trainer, Failure> {
    let ckpt = load_checkpoint(path)?;
    let tasks = ckpt.config.resolve_tasks()?;
    Ok(ckpt.into_trainer(tasks)?)
}

fn check_task(trainer: &Trainer, task: usize) -> CliResult {
    if task >= trainer.completed() {
        return Err(Failure::Config(format!(
            "task {task} has not been learned ({} tasks completed)",
            trainer.completed()
        )));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let trainer = restore(&a.checkpoint)?;
    if trainer.completed() == 0 {
        return Err(Failure::Config("checkpoint has no completed task".into()));
    }
    if let Some(t) = a.task {
        check_task(&trainer, t)?;
    }
    let mut report = if a.recompute {
        trainer.evaluate(trainer.completed() - 1)?
    } else {
        trainer.reports().last().cloned().unwrap_or_default()
    };
    if let Some(t) = a.task {
        let keep: Vec<usize> = (0..report.tasks.len())
            .filter(|&i| report.tasks[i].task == t)
            .collect();
        report = EvalReport {
            tasks: keep.iter().map(|&i| report.tasks[i].clone()).collect(),
            routing: keep.iter().map(|&i| report.routing[i].clone()).collect(),
        };
    }
    let stdout = std::io::stdout();
    report.write_csv(stdout.lock(), true)?;
    Ok(())
}

fn decoding_expert(trainer: &Trainer, a: &SampleArgs) -> Result<VaeExpert, Failure> {
    check_task(trainer, a.task)?;
    let experts = trainer.experts()?;
    let k = a.expert.unwrap_or(trainer.state().task_expert[a.task]);
    experts.get(k).cloned().ok_or_else(|| {
        Failure::Config(format!(
            "expert {k} does not exist ({} experts)",
            experts.len()
        ))
    })
}

fn test_row(trainer: &Trainer, task: usize, row: usize) -> Result<Vec<f64>, Failure> {
    let ds = &trainer.tasks()[task];
    if row >= ds.test_len() {
        return Err(Failure::Config(format!(
            "sample {row} out of range (task {task} has {} test samples)",
            ds.test_len()
        )));
    }
    Ok(ds.test().row(row).to_vec())
}

fn interpolate(a: InterpolateArgs) -> CliResult {
    let trainer = restore(&a.common.checkpoint)?;
    let expert = decoding_expert(&trainer, &a.common)?;
    let x0 = test_row(&trainer, a.common.task, a.from)?;
    let x1 = test_row(&trainer, a.common.task, a.to)?;
    let frames = latent_interpolate(&expert, trainer.store(), &x0, &x1, a.common.steps)?;
    let shape = trainer.tasks()[a.common.task].shape();
    let paths = write_frames(&a.common.output_dir, "interpolate", &frames, shape)?;
    println!(
        "wrote {} frames to {}",
        paths.len(),
        a.common.output_dir.display()
    );
    Ok(())
}

fn traverse(a: TraverseArgs) -> CliResult {
    let trainer = restore(&a.common.checkpoint)?;
    let expert = decoding_expert(&trainer, &a.common)?;
    let x = test_row(&trainer, a.common.task, a.sample)?;
    let frames = latent_traverse(
        &expert,
        trainer.store(),
        &x,
        a.dim,
        (a.range[0], a.range[1]),
        a.common.steps,
    )?;
    let shape = trainer.tasks()[a.common.task].shape();
    let stem = format!("traverse_dim{}", a.dim);
    let paths = write_frames(&a.common.output_dir, &stem, &frames, shape)?;
    println!(
        "wrote {} frames to {}",
        paths.len(),
        a.common.output_dir.display()
    );
    Ok(())
}

fn classify(a: ClassifyArgs) -> CliResult {
    let trainer = restore(&a.checkpoint)?;
    let tasks: Vec<usize> = match a.task {
        Some(t) => {
            check_task(&trainer, t)?;
            vec![t]
        }
        None => (0..trainer.completed()).collect(),
    };
    let sink: Box<dyn Write> = match &a.output {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["sample", "task", "expert", "predicted", "true"])?;
    let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
    for t in tasks {
        for r in trainer.classify_test(t)? {
            w.write_record([
                r.sample.to_string(),
                t.to_string(),
                r.expert.to_string(),
                opt(r.predicted),
                opt(r.label),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    print!("{}", ckpt.manifest());
    Ok(())
}
