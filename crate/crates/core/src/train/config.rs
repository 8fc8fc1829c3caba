use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::data::{
    apply_transform, load_idx, read_dataset, synthesize, Generator, ImageShape, SynthSpec,
    TaskDataset, Transform,
};
use crate::discrete::TemperatureSchedule;
use crate::error::{Error, Result};
use crate::mixture::{InferenceMode, DEFAULT_FLOOR, DEFAULT_PENALTY};
use crate::vae::{BetaSchedule, DisentangleSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Unsupervised,
    Disentangled,
    Supervised,
    SemiSupervised,
}

impl Mode {
    pub fn uses_labels(self) -> bool {
        matches!(self, Mode::Supervised | Mode::SemiSupervised)
    }
}

/// How many experts exist and how tasks are assigned to them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Capacity {
    /// `experts` experts gated by the assignment and Dirichlet machinery.
    Fixed { experts: usize },
    /// Experts grow on demand; `threshold` is the novelty cut-off.
    Expansion {
        threshold: f64,
        #[serde(default = "default_probe")]
        probe: usize,
    },
    /// One expert trained on every task in turn, nothing frozen.
    Transfer,
}

fn default_probe() -> usize {
    128
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    Logistic,
    Identity,
}

impl From<OutputKind> for Activation {
    fn from(k: OutputKind) -> Self {
        match k {
            OutputKind::Logistic => Activation::Logistic,
            OutputKind::Identity => Activation::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub output: OutputKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent: 10,
            hidden: vec![128],
            output: OutputKind::Logistic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate of the cross-entropy step; defaults to `learning_rate`.
    pub classifier_learning_rate: Option<f64>,
    /// Batches scored when a new task arrives.
    pub selection_batches: usize,
    /// Test samples per task used by evaluation.
    pub eval_samples: usize,
    /// Test samples used by the per-epoch transfer score.
    pub transfer_samples: usize,
    pub inference: InferenceMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            classifier_learning_rate: None,
            selection_batches: 8,
            eval_samples: 512,
            transfer_samples: 256,
            inference: InferenceMode::Deterministic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// Dirichlet parameter `e` of consumed experts.
    pub floor: f64,
    /// Assignment penalty `u`.
    pub penalty: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            floor: DEFAULT_FLOOR,
            penalty: DEFAULT_PENALTY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_ramp: f64,
    pub gamma: f64,
    pub capacity_start: f64,
    pub capacity_end: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Weight of the labeled term in semi-supervised mode.
    pub semi_beta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let b = BetaSchedule::default();
        let t = TemperatureSchedule::default();
        Self {
            beta_start: b.start,
            beta_end: b.end,
            beta_ramp: b.ramp_fraction,
            gamma: 4.0,
            capacity_start: 0.5,
            capacity_end: 25.0,
            temperature_start: t.start,
            temperature_end: t.end,
            semi_beta: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn beta(&self) -> BetaSchedule {
        BetaSchedule {
            start: self.beta_start,
            end: self.beta_end,
            ramp_fraction: self.beta_ramp,
        }
    }

    pub fn disentangle(&self) -> Result<DisentangleSchedule> {
        DisentangleSchedule::new(self.gamma, self.capacity_start, self.capacity_end)
    }

    pub fn temperature(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            start: self.temperature_start,
            end: self.temperature_end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum TaskSource {
    Synth {
        generator: String,
        seed: u64,
        train: usize,
        test: usize,
        #[serde(default = "default_side")]
        height: u16,
        #[serde(default = "default_side")]
        width: u16,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// IDX image/label files. The pool is rows `offset, offset + stride, ...`
    /// which are then shuffled and split.
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
        train: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        offset: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        /// Transforms applied in order, e.g. `["rotate90", "permute-pixels(7)"]`.
        #[serde(default)]
        transforms: Vec<String>,
        /// Labels become `(label + label_shift) mod classes`.
        #[serde(default)]
        label_shift: usize,
        classes: Option<usize>,
    },
    Container {
        path: PathBuf,
    },
}

fn default_side() -> u16 {
    8
}
fn default_classes() -> usize {
    4
}
fn default_noise() -> f64 {
    0.1
}
fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: Option<String>,
    /// Overrides `training.epochs` for this task.
    pub epochs: Option<usize>,
    /// Labeled training samples in semi-supervised mode.
    pub labeled: Option<usize>,
    #[serde(flatten)]
    pub source: TaskSource,
}

impl TaskConfig {
    pub fn synth(spec: &SynthSpec) -> Self {
        Self {
            name: None,
            epochs: None,
            labeled: None,
            source: TaskSource::Synth {
                generator: spec.generator.to_string(),
                seed: spec.seed,
                train: spec.train,
                test: spec.test,
                height: spec.height,
                width: spec.width,
                classes: spec.classes,
                noise: spec.noise,
            },
        }
    }

    /// Loads or generates the task's data.
    pub fn resolve(&self) -> Result<TaskDataset> {
        let ds = match &self.source {
            TaskSource::Synth {
                generator,
                seed,
                train,
                test,
                height,
                width,
                classes,
                noise,
            } => {
                let generator: Generator = generator.parse()?;
                synthesize(&SynthSpec {
                    generator,
                    seed: *seed,
                    train: *train,
                    test: *test,
                    height: *height,
                    width: *width,
                    classes: *classes,
                    noise: *noise,
                })?
            }
            TaskSource::Idx {
                images,
                labels,
                train,
                test,
                seed,
                offset,
                stride,
                transforms,
                label_shift,
                classes,
            } => {
                if *stride == 0 {
                    return Err(Error::config("idx stride must be positive"));
                }
                let data = load_idx(images, labels.as_deref())?;
                let rows: Vec<usize> = (*offset..data.images.rows()).step_by(*stride).collect();
                let pool = data.images.select_rows(&rows);
                let classes = classes.unwrap_or_else(|| {
                    data.labels
                        .as_ref()
                        .map_or(1, |l| l.iter().max().map_or(1, |m| m + 1))
                });
                let pool_labels: Option<Vec<usize>> = data.labels.as_ref().map(|l| {
                    rows.iter()
                        .map(|&i| (l[i] + label_shift) % classes)
                        .collect()
                });
                let name = images
                    .file_name()
                    .map_or("idx".into(), |n| n.to_string_lossy().into_owned());
                let shape = data.shape;
                let ds = TaskDataset::from_pool(
                    name,
                    shape,
                    classes,
                    &pool,
                    pool_labels.as_deref(),
                    *train,
                    *test,
                    *seed,
                )?;
                let mut ds = ds;
                for t in transforms {
                    let t: Transform = t.parse()?;
                    let name = format!("{}+{t}", ds.name());
                    ds = apply_transform(&ds, &t, name)?;
                }
                ds
            }
            TaskSource::Container { path } => {
                read_dataset(&mut std::io::BufReader::new(std::fs::File::open(path)?))?
            }
        };
        Ok(match &self.name {
            Some(n) => ds.renamed(n.clone()),
            None => ds,
        })
    }

    fn absolutize(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.source {
            TaskSource::Idx { images, labels, .. } => {
                fix(images);
                if let Some(l) = labels {
                    fix(l);
                }
            }
            TaskSource::Container { path } => fix(path),
            TaskSource::Synth { .. } => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub mode: Mode,
    pub capacity: Capacity,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub schedules: ScheduleConfig,
    pub tasks: Vec<TaskConfig>,
}

fn default_name() -> String {
    "run".into()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() {
            Path::new(".")
        } else {
            base
        };
        let base = std::fs::canonicalize(base)?;
        cfg.tasks.iter_mut().for_each(|t| t.absolutize(&base));
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if self.tasks.is_empty() {
            return Err(Error::config("no tasks configured"));
        }
        match self.capacity {
            Capacity::Fixed { experts: 0 } => {
                return Err(Error::config("fixed capacity needs at least one expert"))
            }
            Capacity::Expansion { threshold, probe } if !(threshold >= 0.0) || probe == 0 => {
                return Err(Error::config(
                    "expansion needs a non-negative threshold and a non-empty probe",
                ))
            }
            Capacity::Expansion { .. } if self.model.hidden.is_empty() => {
                return Err(Error::config("expansion needs at least one hidden layer"))
            }
            _ => {}
        }
        if self.model.latent == 0 || self.model.hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if t.epochs == 0 || self.tasks.iter().any(|k| k.epochs == Some(0)) {
            return Err(Error::config("epoch counts must be positive"));
        }
        if t.batch_size == 0
            || t.selection_batches == 0
            || t.eval_samples == 0
            || t.transfer_samples == 0
        {
            return Err(Error::config(
                "batch size and evaluation sizes must be positive",
            ));
        }
        for lr in std::iter::once(t.learning_rate).chain(t.classifier_learning_rate) {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!(
                    "learning rate must be positive, got {lr}"
                )));
            }
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                t.momentum
            )));
        }
        if !(self.gate.floor > 0.0) || !(self.gate.penalty > 0.0) {
            return Err(Error::config("gate floor and penalty must be positive"));
        }
        if let Capacity::Fixed { experts } = self.capacity {
            if self.gate.floor * experts as f64 >= 1.0 {
                return Err(Error::config(
                    "gate floor times expert count must stay below 1",
                ));
            }
        }
        let s = &self.schedules;
        s.beta().validate()?;
        s.disentangle()?;
        s.temperature().validate()?;
        if !(s.semi_beta >= 0.0) {
            return Err(Error::config("semi-supervised beta must be non-negative"));
        }
        if self.mode == Mode::SemiSupervised {
            if let Some(i) = self.tasks.iter().position(|k| k.labeled.is_none()) {
                return Err(Error::config(format!(
                    "task {i} needs a `labeled` count in semi-supervised mode"
                )));
            }
        }
        for k in &self.tasks {
            match &k.source {
                TaskSource::Synth { generator, .. } => {
                    generator.parse::<Generator>()?;
                }
                TaskSource::Idx { transforms, .. } => {
                    for t in transforms {
                        t.parse::<Transform>()?;
                    }
                }
                TaskSource::Container { .. } => {}
            }
        }
        Ok(())
    }

    pub fn epochs_for(&self, task: usize) -> usize {
        self.tasks[task].epochs.unwrap_or(self.training.epochs)
    }

    pub fn resolve_tasks(&self) -> Result<Vec<TaskDataset>> {
        let tasks: Vec<TaskDataset> = self
            .tasks
            .iter()
            .map(TaskConfig::resolve)
            .collect::<Result<_>>()?;
        let dim = tasks[0].dim();
        if let Some(i) = tasks.iter().position(|t| t.dim() != dim) {
            return Err(Error::config(format!(
                "task {i} has {} pixels, task 0 has {dim}",
                tasks[i].dim()
            )));
        }
        if self.mode.uses_labels() {
            if let Some(i) = tasks.iter().position(|t| !t.has_labels()) {
                return Err(Error::config(format!("task {i} has no labels")));
            }
        }
        Ok(tasks)
    }

    pub fn image_shape(tasks: &[TaskDataset]) -> ImageShape {
        tasks[0].shape()
    }
}
