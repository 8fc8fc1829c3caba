use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Sgd};
use crate::data::{
    batch_order, batches, epoch_stream, one_hot, split_semi_supervised, TaskDataset,
};
use crate::discrete::{
    classify, cross_entropy, semi_supervised_loss, supervised_elbo, SemiSupervisedBatch,
};
use crate::error::{Error, Result};
use crate::expansion::{Decision, ExpansionPool, NoveltyReport};
use crate::metrics::{
    mse, psnr_from_mse, ssim, transfer_score, Delta, EvalReport, TaskMetrics, TransferCurve,
};
use crate::mixture::{
    inference_probabilities, pick, score_samples, weighted_objective, MixtureState, SelectionReport,
};
use crate::train::config::{Capacity, Mode, RunConfig};
use crate::train::events::EventLog;
use crate::vae::{sample_noise, ExpertArch, VaeExpert};

/// Shuffle stream reserved for the batches scored at a task switch.
const SELECTION_EPOCH: usize = u32::MAX as usize;
const LABELED_SALT: u64 = 0x6c61_6265_6c65_6421;
const EVAL_SALT: u64 = 0x6576_616c_7561_7465;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Mixture(MixtureState),
    Expansion(ExpansionPool),
}

/// Digest recorded when a parameter group was frozen; `expert` is `None`
/// for the shared sub-networks of an expansion pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub task: usize,
    pub expert: Option<usize>,
    pub digest: String,
}

/// Everything besides parameter values needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub model: Model,
    pub rng: ChaCha8Rng,
    pub completed: usize,
    pub step: u64,
    /// Expert that learned each completed task.
    pub task_expert: Vec<usize>,
    pub freezes: Vec<FreezeRecord>,
    pub curves: Vec<TransferCurve>,
    pub reports: Vec<EvalReport>,
    pub log: EventLog,
}

/// One routed test sample; `predicted` is `None` for experts without a
/// class encoder and `label` is `None` for unlabeled tasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutedSample {
    pub sample: usize,
    pub expert: usize,
    pub predicted: Option<usize>,
    pub label: Option<usize>,
}

pub struct Trainer {
    config: RunConfig,
    tasks: Arc<Vec<TaskDataset>>,
    store: ParamStore,
    state: TrainerState,
}

pub fn expert_arch(config: &RunConfig, tasks: &[TaskDataset]) -> ExpertArch {
    ExpertArch {
        input_dim: tasks[0].dim(),
        latent_dim: config.model.latent,
        hidden: config.model.hidden.clone(),
        classes: config
            .mode
            .uses_labels()
            .then(|| tasks.iter().map(TaskDataset::classes).max().unwrap_or(1)),
        output: config.model.output.into(),
    }
}

struct Optimizers {
    elbo: Sgd,
    classifier: Sgd,
}

impl Trainer {
    pub fn new(config: RunConfig, tasks: Vec<TaskDataset>) -> Result<Self> {
        config.validate()?;
        if tasks.len() != config.tasks.len() {
            return Err(Error::config(format!(
                "{} datasets for {} configured tasks",
                tasks.len(),
                config.tasks.len()
            )));
        }
        let arch = expert_arch(&config, &tasks);
        if arch.classes == Some(1) {
            return Err(Error::config("labeled modes need at least two classes"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = match config.capacity {
            Capacity::Fixed { experts } => {
                let experts = (0..experts)
                    .map(|i| VaeExpert::new(&mut store, i, &arch, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                Model::Mixture(MixtureState::new(
                    experts,
                    config.gate.penalty,
                    config.gate.floor,
                )?)
            }
            Capacity::Transfer => {
                let e = VaeExpert::new(&mut store, 0, &arch, &mut rng)?;
                Model::Mixture(MixtureState::new(
                    vec![e],
                    config.gate.penalty,
                    config.gate.floor,
                )?)
            }
            Capacity::Expansion { threshold, probe } => Model::Expansion(ExpansionPool::new(
                &mut store, &arch, threshold, probe, &mut rng,
            )?),
        };
        let state = TrainerState {
            model,
            rng,
            completed: 0,
            step: 0,
            task_expert: Vec::new(),
            freezes: Vec::new(),
            curves: Vec::new(),
            reports: Vec::new(),
            log: EventLog::new(),
        };
        Ok(Self {
            config,
            tasks: Arc::new(tasks),
            store,
            state,
        })
    }

    /// Rebuilds a trainer from saved parts; `tasks` must be the run's data.
    pub fn from_parts(
        config: RunConfig,
        tasks: Vec<TaskDataset>,
        store: ParamStore,
        state: TrainerState,
    ) -> Result<Self> {
        config.validate()?;
        if tasks.len() != config.tasks.len() {
            return Err(Error::config(
                "dataset count does not match the checkpointed run",
            ));
        }
        let t = Self {
            config,
            tasks: Arc::new(tasks),
            store,
            state,
        };
        t.audit()?;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn log(&self) -> &EventLog {
        &self.state.log
    }

    pub fn completed(&self) -> usize {
        self.state.completed
    }

    pub fn is_finished(&self) -> bool {
        self.state.completed == self.tasks.len()
    }

    pub fn reports(&self) -> &[EvalReport] {
        &self.state.reports
    }

    pub fn curves(&self) -> &[TransferCurve] {
        &self.state.curves
    }

    /// Current experts; expansion pools are composed on the fly.
    pub fn experts(&self) -> Result<Vec<VaeExpert>> {
        match &self.state.model {
            Model::Mixture(m) => Ok(m.experts().to_vec()),
            Model::Expansion(p) => (0..p.len()).map(|i| p.compose_expert(i)).collect(),
        }
    }

    fn is_transfer(&self) -> bool {
        self.config.capacity == Capacity::Transfer
    }

    fn latent(&self) -> usize {
        self.config.model.latent
    }

    /// Trains every remaining task.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_task()?;
        }
        Ok(())
    }

    /// Trains the next task, freezes what it consumed and evaluates every
    /// task seen so far.
    pub fn run_task(&mut self) -> Result<&EvalReport> {
        let t = self.state.completed;
        if t >= self.tasks.len() {
            return Err(Error::contract("every task has already been trained"));
        }
        let tasks = Arc::clone(&self.tasks);
        let ds = &tasks[t];
        let active = self.begin_task(t, ds)?;
        self.train_task(t, ds, active)?;
        self.end_task(t, active)?;
        let report = self.evaluate(t)?;
        for m in &report.tasks {
            let mut row =
                |field: &str, v: f64| self.state.log.push("eval", Some(m.task), None, field, v);
            row("nll", m.nll);
            row("mse", m.mse);
            row("psnr", m.psnr);
            row("ssim", m.ssim);
            if let Some(a) = m.accuracy {
                row("accuracy", a);
            }
            if let Some(r) = m.routing_accuracy {
                row("routing_accuracy", r);
            }
        }
        self.state.reports.push(report);
        self.state.completed += 1;
        self.audit()?;
        Ok(self.state.reports.last().expect("report was just pushed"))
    }

    fn selection_rows(&self, t: usize, ds: &TaskDataset, count: usize) -> Vec<usize> {
        let mut order = batch_order(
            ds.train_len(),
            self.config.seed,
            epoch_stream(t, SELECTION_EPOCH),
        );
        order.truncate(count);
        order
    }

    /// Picks the expert that learns task `t` and logs the decision.
    fn begin_task(&mut self, t: usize, ds: &TaskDataset) -> Result<usize> {
        let bs = self.config.training.batch_size;
        let transfer = self.is_transfer();
        let count = match self.config.capacity {
            Capacity::Expansion { probe, .. } => probe,
            _ => bs * self.config.training.selection_batches,
        };
        let rows = self.selection_rows(t, ds, count);
        let st = &mut self.state;
        match &mut st.model {
            Model::Mixture(m) => {
                let probes: Vec<_> = batches(&rows, bs)
                    .map(|b| ds.train().select_rows(b))
                    .collect();
                let report = if transfer {
                    let per_batch = m.batch_elbos(&self.store, &probes, &mut st.rng)?;
                    let elbos =
                        vec![per_batch.iter().map(|b| b[0]).sum::<f64>() / per_batch.len() as f64];
                    SelectionReport {
                        selection: inference_probabilities(&elbos)?,
                        elbos,
                        assignment: Vec::new(),
                        chosen: 0,
                    }
                } else {
                    let r = m.select_and_freeze(&self.store, &probes, &mut st.rng)?;
                    m.prepare_training()?;
                    r
                };
                st.log.push(
                    "selection",
                    Some(t),
                    Some(report.chosen),
                    "report",
                    serde_json::to_string(&report)?,
                );
                Ok(report.chosen)
            }
            Model::Expansion(pool) => {
                let (report, chosen) = if pool.is_empty() {
                    let i = pool.add_expert(&mut self.store, &mut st.rng)?;
                    let r = NoveltyReport {
                        scores: Vec::new(),
                        min_score: f64::INFINITY,
                        decision: Decision::AddNew,
                    };
                    (r, i)
                } else {
                    let r = pool.decide(&self.store, &ds.train().select_rows(&rows))?;
                    let chosen = match r.decision {
                        Decision::AddNew => pool.add_expert(&mut self.store, &mut st.rng)?,
                        Decision::Update(l) => l,
                    };
                    (r, chosen)
                };
                st.log.push(
                    "novelty",
                    Some(t),
                    Some(chosen),
                    "report",
                    serde_json::to_string(&report)?,
                );
                Ok(chosen)
            }
        }
    }

    fn optimizers(&self, experts: &[VaeExpert], active: usize) -> Result<Optimizers> {
        let tr = &self.config.training;
        let mut elbo = Sgd::new(tr.learning_rate, tr.momentum)?;
        let mut classifier = Sgd::new(
            tr.classifier_learning_rate.unwrap_or(tr.learning_rate),
            tr.momentum,
        )?;
        let mut trainable: Vec<ParamId> = match &self.state.model {
            Model::Expansion(pool) => pool.trainable_params(active)?,
            Model::Mixture(_) => experts
                .iter()
                .filter(|e| !e.is_frozen())
                .flat_map(|e| e.params())
                .collect(),
        };
        trainable.sort_unstable();
        trainable.dedup();
        elbo.register_all(&self.store, trainable.iter().copied())?;
        for e in experts.iter().filter(|e| !e.is_frozen()) {
            if let Some(c) = e.class_encoder() {
                classifier.register_all(&self.store, c.network().params())?;
            }
        }
        Ok(Optimizers { elbo, classifier })
    }

    fn train_task(&mut self, t: usize, ds: &TaskDataset, active: usize) -> Result<()> {
        let cfg = self.config.clone();
        let bs = cfg.training.batch_size;
        let epochs = cfg.epochs_for(t);
        // Experts that take part in the objective, and the index of the
        // active one among them.
        let (experts, local_active) = match &self.state.model {
            Model::Mixture(m) => (m.experts().to_vec(), active),
            Model::Expansion(p) => (vec![p.compose_expert(active)?], 0),
        };
        let mut opt = self.optimizers(&experts, active)?;
        let split = match cfg.mode {
            Mode::SemiSupervised => {
                let labeled = cfg.tasks[t].labeled.expect("validated");
                Some(split_semi_supervised(ds, labeled, cfg.seed ^ t as u64)?)
            }
            _ => None,
        };
        // The rows an epoch walks through.
        let main: Vec<usize> = match &split {
            Some(s) if !s.unlabeled.is_empty() => s.unlabeled.clone(),
            Some(s) => s.labeled.clone(),
            None => (0..ds.train_len()).collect(),
        };
        if main.is_empty() {
            return Err(Error::config(format!("task {t} has no training samples")));
        }
        let steps_per_epoch = main.len().div_ceil(bs);
        let total = (epochs * steps_per_epoch) as f64;
        let probe_n = cfg.training.transfer_samples.min(ds.test_len());
        let probe_rows: Vec<usize> = (0..probe_n).collect();
        let probe = ds.test().select_rows(&probe_rows);
        let probe_labels = ds.test_labels().map(|l| l[..probe_n].to_vec());
        let mut mse_curve = TransferCurve::new(t, active, Delta::Mse);
        let mut acc_curve = TransferCurve::new(t, active, Delta::Accuracy);
        let labels_mode = cfg.mode.uses_labels();
        for epoch in 0..epochs {
            let order: Vec<usize> = batch_order(main.len(), cfg.seed, epoch_stream(t, epoch))
                .into_iter()
                .map(|i| main[i])
                .collect();
            let labeled_order: Vec<usize> = match &split {
                Some(s) if !s.labeled.is_empty() => batch_order(
                    s.labeled.len(),
                    cfg.seed ^ LABELED_SALT,
                    epoch_stream(t, epoch),
                )
                .into_iter()
                .map(|i| s.labeled[i])
                .collect(),
                _ => Vec::new(),
            };
            let mut cursor = 0;
            let mut loss_sum = 0.0;
            for (b, rows) in batches(&order, bs).enumerate() {
                let progress = (epoch * steps_per_epoch + b) as f64 / total;
                let weights = self.step_weights(experts.len())?;
                let loss = match cfg.mode {
                    Mode::SemiSupervised
                        if !split.as_ref().expect("semi split").unlabeled.is_empty() =>
                    {
                        let take = bs.min(labeled_order.len());
                        let lab: Vec<usize> = (0..take)
                            .map(|k| labeled_order[(cursor + k) % labeled_order.len().max(1)])
                            .collect();
                        cursor = (cursor + take) % labeled_order.len().max(1);
                        self.semi_step(ds, &experts, &weights, rows, &lab, progress, &mut opt)?
                    }
                    _ => self.step_on(ds, &experts, &weights, rows, progress, &mut opt)?,
                };
                loss_sum += loss;
                self.state.step += 1;
            }
            let step = self.state.step;
            self.state.log.push(
                "epoch",
                Some(t),
                Some(active),
                "loss",
                loss_sum / steps_per_epoch as f64,
            );
            let e = &experts[local_active];
            let s = transfer_score(e, &self.store, &probe, None, Delta::Mse)?;
            mse_curve.push(step, s)?;
            self.state
                .log
                .push("transfer", Some(t), Some(active), "mse", s);
            if labels_mode {
                let a = transfer_score(
                    e,
                    &self.store,
                    &probe,
                    probe_labels.as_deref(),
                    Delta::Accuracy,
                )?;
                acc_curve.push(step, a)?;
                self.state
                    .log
                    .push("transfer", Some(t), Some(active), "accuracy", a);
            }
        }
        self.state.curves.push(mse_curve);
        if labels_mode {
            self.state.curves.push(acc_curve);
        }
        Ok(())
    }

    fn step_weights(&mut self, k: usize) -> Result<Vec<f64>> {
        let transfer = self.is_transfer();
        match &mut self.state.model {
            Model::Mixture(m) if !transfer => Ok(m.resample_weights(&mut self.state.rng)?.to_vec()),
            _ => Ok(vec![1.0; k.min(1)]),
        }
    }

    /// One update for the unsupervised, disentangled and supervised modes.
    fn step_on(
        &mut self,
        ds: &TaskDataset,
        experts: &[VaeExpert],
        weights: &[f64],
        rows: &[usize],
        progress: f64,
        opt: &mut Optimizers,
    ) -> Result<f64> {
        let x_t = ds.train().select_rows(rows);
        let latent = self.latent();
        let noise_t = sample_noise(&mut self.state.rng, rows.len(), latent);
        let store = &self.store;
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let noise = g.constant(noise_t);
        let labels = match self.config.mode {
            Mode::Supervised => {
                let l = ds.train_labels().expect("labels checked at resolve");
                let picked: Vec<usize> = rows.iter().map(|&i| l[i]).collect();
                Some(one_hot(
                    &picked,
                    experts[0].class_encoder().map_or(0, |c| c.classes()),
                )?)
            }
            _ => None,
        };
        let objective = match self.config.mode {
            Mode::Unsupervised => {
                let beta = self.config.schedules.beta().value(progress);
                weighted_objective(&mut g, experts, weights, |e, g| {
                    Ok(e.elbo(g, store, x, noise, beta)?.elbo)
                })?
            }
            Mode::Disentangled => {
                let sched = self
                    .config
                    .schedules
                    .disentangle()?
                    .with_progress(progress)?;
                weighted_objective(&mut g, experts, weights, |e, g| {
                    e.disentangled_objective(g, store, x, noise, &sched)
                })?
            }
            Mode::Supervised => {
                let y = labels.as_ref().expect("supervised labels");
                weighted_objective(&mut g, experts, weights, |e, g| {
                    supervised_elbo(e, g, store, x, noise, y)
                })?
            }
            Mode::SemiSupervised => unreachable!("semi-supervised steps go through semi_step"),
        };
        let loss = g.scale(objective, -1.0);
        let value = g.scalar(loss);
        self.apply(&mut g, loss, &mut opt.elbo)?;
        if let Some(y) = labels {
            self.classifier_step(experts, weights, &x_t, &y, &mut opt.classifier)?;
        }
        Ok(value)
    }

    #[allow(clippy::too_many_arguments)]
    fn semi_step(
        &mut self,
        ds: &TaskDataset,
        experts: &[VaeExpert],
        weights: &[f64],
        unlabeled: &[usize],
        labeled: &[usize],
        progress: f64,
        opt: &mut Optimizers,
    ) -> Result<f64> {
        let l = ds.train_labels().expect("labels checked at resolve");
        let classes = experts[0].class_encoder().map_or(0, |c| c.classes());
        let y = one_hot(&labeled.iter().map(|&i| l[i]).collect::<Vec<_>>(), classes)?;
        let xl = ds.train().select_rows(labeled);
        let batch =
            SemiSupervisedBatch::new(xl.clone(), y.clone(), ds.train().select_rows(unlabeled))?;
        let temperature = self.config.schedules.temperature().value(progress);
        let beta = if labeled.is_empty() {
            0.0
        } else {
            self.config.schedules.semi_beta
        };
        let mut g = Graph::new();
        let objective = semi_supervised_loss(
            experts,
            weights,
            &mut g,
            &self.store,
            &batch,
            beta,
            temperature,
            &mut self.state.rng,
        )?;
        let loss = g.scale(objective, -1.0);
        let value = g.scalar(loss);
        self.apply(&mut g, loss, &mut opt.elbo)?;
        if !labeled.is_empty() {
            self.classifier_step(experts, weights, &xl, &y, &mut opt.classifier)?;
        }
        Ok(value)
    }

    /// The cross-entropy update, taken as its own step after the ELBO step.
    fn classifier_step(
        &mut self,
        experts: &[VaeExpert],
        weights: &[f64],
        x: &crate::Tensor,
        y: &crate::Tensor,
        opt: &mut Sgd,
    ) -> Result<()> {
        let store = &self.store;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ce = weighted_objective(&mut g, experts, weights, |e, g| {
            cross_entropy(e, g, store, xv, y)
        })?;
        self.apply(&mut g, ce, opt)
    }

    fn apply(&mut self, g: &mut Graph, loss: crate::autodiff::Var, opt: &mut Sgd) -> Result<()> {
        if !g.requires_grad(loss) {
            return Ok(());
        }
        g.backward(loss)?;
        self.store.accumulate_grads(g);
        let r = opt.step(&mut self.store);
        self.store.clear_grads();
        r
    }

    fn end_task(&mut self, t: usize, active: usize) -> Result<()> {
        let transfer = self.is_transfer();
        match &mut self.state.model {
            Model::Mixture(m) if !transfer => {
                if let Some((j, digest)) = m.freeze_pending(&mut self.store) {
                    self.state
                        .log
                        .push("freeze", Some(t), Some(j), "digest", &digest);
                    self.state.freezes.push(FreezeRecord {
                        task: t,
                        expert: Some(j),
                        digest,
                    });
                }
            }
            Model::Expansion(pool) if !pool.shared_frozen() => {
                pool.freeze_shared(&mut self.store);
                let digest = pool.shared_digest(&self.store);
                self.state
                    .log
                    .push("freeze", Some(t), None, "shared", &digest);
                self.state.freezes.push(FreezeRecord {
                    task: t,
                    expert: None,
                    digest,
                });
            }
            _ => {}
        }
        self.state.task_expert.push(active);
        Ok(())
    }

    /// Recomputes every recorded freeze digest.
    pub fn audit(&self) -> Result<()> {
        let experts = self.experts()?;
        for r in &self.state.freezes {
            let (what, current) = match (r.expert, &self.state.model) {
                (Some(i), _) => (
                    format!("expert {i}"),
                    experts
                        .get(i)
                        .ok_or(Error::Range {
                            what: "expert",
                            index: i,
                            len: experts.len(),
                        })?
                        .digest(&self.store),
                ),
                (None, Model::Expansion(p)) => ("shared".to_string(), p.shared_digest(&self.store)),
                (None, Model::Mixture(_)) => {
                    return Err(Error::contract("shared freeze record on a mixture"))
                }
            };
            if current != r.digest {
                return Err(Error::FreezeViolation {
                    what,
                    recorded: r.digest.clone(),
                    current,
                });
            }
        }
        Ok(())
    }

    /// Test metrics on tasks `0..=after_task` with per-sample routing.
    pub fn evaluate(&self, after_task: usize) -> Result<EvalReport> {
        let experts = self.experts()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ EVAL_SALT);
        rng.set_stream(after_task as u64);
        let mut report = EvalReport::default();
        for task in 0..=after_task.min(self.tasks.len() - 1) {
            let m =
                self.evaluate_task(task, after_task, &experts, &mut rng, &mut report.routing)?;
            report.tasks.push(m);
        }
        Ok(report)
    }

    /// Routes the first `eval_samples` test rows of `task` and classifies
    /// each with its expert. Noise comes from the evaluation stream of the
    /// latest completed task, so the routes match [`Trainer::evaluate`].
    pub fn classify_test(&self, task: usize) -> Result<Vec<RoutedSample>> {
        let ds = self.tasks.get(task).ok_or(Error::Range {
            what: "task list",
            index: task,
            len: self.tasks.len(),
        })?;
        let experts = self.experts()?;
        let after_task = self.state.completed.saturating_sub(1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ EVAL_SALT);
        rng.set_stream(after_task as u64);
        let n = self.config.training.eval_samples.min(ds.test_len());
        let rows: Vec<usize> = (0..n).collect();
        let x = ds.test().select_rows(&rows);
        let noise = sample_noise(&mut rng, n, self.latent());
        let scores = score_samples(&experts, &self.store, &x, &noise)?;
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            let l: Vec<f64> = scores.iter().map(|s| s[b]).collect();
            let k = pick(
                &inference_probabilities(&l)?,
                self.config.training.inference,
                &mut rng,
            );
            let xb = x.select_rows(&[b]);
            let predicted = experts[k]
                .class_code(&self.store, &xb)?
                .map(|p| classify(&p)[0].label);
            out.push(RoutedSample {
                sample: b,
                expert: k,
                predicted,
                label: ds.test_labels().map(|l| l[b]),
            });
        }
        Ok(out)
    }

    fn evaluate_task(
        &self,
        task: usize,
        after_task: usize,
        experts: &[VaeExpert],
        rng: &mut ChaCha8Rng,
        routing: &mut Vec<Vec<usize>>,
    ) -> Result<TaskMetrics> {
        let ds = &self.tasks[task];
        let n = self.config.training.eval_samples.min(ds.test_len());
        if n == 0 {
            return Err(Error::config(format!(
                "task {task} has an empty test split"
            )));
        }
        let rows: Vec<usize> = (0..n).collect();
        let x = ds.test().select_rows(&rows);
        let noise = sample_noise(rng, n, self.latent());
        let scores = score_samples(experts, &self.store, &x, &noise)?;
        let routes: Vec<usize> = (0..n)
            .map(|b| {
                let l: Vec<f64> = scores.iter().map(|s| s[b]).collect();
                Ok(pick(
                    &inference_probabilities(&l)?,
                    self.config.training.inference,
                    rng,
                ))
            })
            .collect::<Result<_>>()?;
        let mut counts = vec![0usize; experts.len()];
        routes.iter().for_each(|&k| counts[k] += 1);
        let labels = ds.test_labels().filter(|_| self.config.mode.uses_labels());
        let (mut nll, mut sq, mut ss, mut hits) = (0.0, 0.0, 0.0, 0usize);
        for (k, e) in experts.iter().enumerate() {
            let idx: Vec<usize> = (0..n).filter(|&b| routes[b] == k).collect();
            if idx.is_empty() {
                continue;
            }
            nll -= idx.iter().map(|&b| scores[k][b]).sum::<f64>();
            let xk = x.select_rows(&idx);
            let recon = e.reconstruct(&self.store, &xk, None)?;
            for r in 0..idx.len() {
                sq += mse(xk.row(r), recon.row(r))?;
                ss += ssim(xk.row(r), recon.row(r), ds.shape())?;
            }
            if let Some(l) = labels {
                if let Some(probs) = e.class_code(&self.store, &xk)? {
                    hits += classify(&probs)
                        .iter()
                        .zip(&idx)
                        .filter(|(c, &b)| c.label == l[b])
                        .count();
                }
            }
        }
        let nf = n as f64;
        let p = psnr_from_mse(sq / nf);
        let owner = self.state.task_expert.get(task).copied();
        routing.push(counts.clone());
        Ok(TaskMetrics {
            task,
            name: ds.name().to_string(),
            after_task,
            step: self.state.step,
            nll: nll / nf,
            mse: sq / nf,
            psnr: p.db,
            psnr_exact: p.exact,
            ssim: ss / nf,
            accuracy: labels.map(|_| hits as f64 / nf),
            routing_accuracy: owner.map(|k| counts[k] as f64 / nf),
        })
    }
}
