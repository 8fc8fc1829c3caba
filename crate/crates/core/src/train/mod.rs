//! The lifelong task loop, its configuration, event log and checkpoints.

mod checkpoint;
mod config;
mod events;
mod run;

use std::path::Path;

pub use checkpoint::Checkpoint;
pub use config::{
    Capacity, GateConfig, Mode, ModelConfig, OutputKind, RunConfig, ScheduleConfig, TaskConfig,
    TaskSource, TrainingConfig,
};
pub use events::{Event, EventLog};
pub use run::{expert_arch, FreezeRecord, Model, RoutedSample, Trainer, TrainerState};

use crate::error::Result;
use crate::metrics::EvalReport;

/// Trains every task of `config`. When `output_dir` is set, writes
/// `events.csv`, `eval.csv`, `task{t}.ckpt` after each task and `last.ckpt`.
pub fn run_lifelong(config: RunConfig) -> Result<(Checkpoint, Vec<EvalReport>)> {
    let tasks = config.resolve_tasks()?;
    let mut trainer = Trainer::new(config, tasks)?;
    run_to_end(&mut trainer)?;
    Ok((Checkpoint::capture(&trainer), trainer.reports().to_vec()))
}

/// Continues `trainer` to the end, writing outputs as [`run_lifelong`] does.
pub fn run_to_end(trainer: &mut Trainer) -> Result<()> {
    while !trainer.is_finished() {
        trainer.run_task()?;
        if let Some(dir) = trainer.config().output_dir.clone() {
            write_outputs(trainer, &dir)?;
        }
    }
    Ok(())
}

fn write_outputs(trainer: &Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    trainer
        .log()
        .write_csv(std::fs::File::create(dir.join("events.csv"))?)?;
    let mut eval = Vec::new();
    for (i, r) in trainer.reports().iter().enumerate() {
        r.write_csv(&mut eval, i == 0)?;
    }
    std::fs::write(dir.join("eval.csv"), eval)?;
    let ckpt = Checkpoint::capture(trainer);
    ckpt.save(&dir.join(format!("task{}.ckpt", trainer.completed() - 1)))?;
    ckpt.save(&dir.join("last.ckpt"))?;
    Ok(())
}
