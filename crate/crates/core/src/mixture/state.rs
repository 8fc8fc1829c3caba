use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::mixture::gate::{
    assignment_log_complements, choose_expert, dirichlet_parameters, inference_probabilities, pick,
    sample_mixing_weights, InferenceMode,
};
use crate::tensor::Tensor;
use crate::vae::{sample_noise, VaeExpert};

/// Experts whose sampled weight falls below this are left out of the
/// objective and receive no gradient.
pub const WEIGHT_CUTOFF: f64 = 1e-6;

/// `Σ_i w_i f_i / Σ_i w_i`, skipping experts below [`WEIGHT_CUTOFF`].
pub fn weighted_objective<F>(
    g: &mut Graph,
    experts: &[VaeExpert],
    weights: &[f64],
    mut f: F,
) -> Result<Var>
where
    F: FnMut(&VaeExpert, &mut Graph) -> Result<Var>,
{
    if experts.is_empty() {
        return Err(Error::contract("mixture has no experts"));
    }
    if experts.len() != weights.len() {
        return Err(Error::dim(format!(
            "{} weights for {} experts",
            weights.len(),
            experts.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract("mixing weights sum to zero"));
    }
    let mut terms = Vec::new();
    for (e, &w) in experts.iter().zip(weights) {
        if w >= WEIGHT_CUTOFF {
            terms.push((f(e, g)?, w / total));
        }
    }
    if terms.is_empty() {
        return Err(Error::contract("every expert fell below the weight cutoff"));
    }
    g.weighted_sum(&terms)
}

/// Per-expert, per-sample ELBOs; `out[i][b]` is expert `i` on sample `b`.
pub fn score_samples(
    experts: &[VaeExpert],
    store: &ParamStore,
    x: &Tensor,
    noise: &Tensor,
) -> Result<Vec<Vec<f64>>> {
    experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let s = e.per_sample_elbo(store, x, noise)?;
            if let Some(b) = s.iter().position(|v| !v.is_finite()) {
                return Err(Error::Scoring {
                    expert: i,
                    reason: format!("sample {b} has ELBO {}", s[b]),
                });
            }
            Ok(s)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Batch-mean ELBO per expert.
    pub elbos: Vec<f64>,
    /// `p(c_j)`; empty for inference-time reports.
    pub assignment: Vec<f64>,
    pub chosen: usize,
    /// Test-time selection probabilities `v_j`.
    pub selection: Vec<f64>,
}

/// The gate over a list of experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    experts: Vec<VaeExpert>,
    /// `c`: experts consumed by a task, including one still training.
    assignment: Vec<bool>,
    /// `c'`: the assignment before the latest selection.
    previous: Vec<bool>,
    /// Selected for the current task but not yet frozen.
    pending: Option<usize>,
    dirichlet: Vec<f64>,
    weights: Vec<f64>,
    penalty: f64,
    floor: f64,
}

impl MixtureState {
    pub fn new(experts: Vec<VaeExpert>, penalty: f64, floor: f64) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::contract("mixture has no experts"));
        }
        if !(penalty > 0.0) || !(floor > 0.0) {
            return Err(Error::config("penalty u and floor e must be positive"));
        }
        let k = experts.len();
        let assignment: Vec<bool> = experts.iter().map(|e| e.is_frozen()).collect();
        let mut state = Self {
            experts,
            previous: assignment.clone(),
            assignment,
            pending: None,
            dirichlet: vec![1.0 / k as f64; k],
            weights: vec![1.0 / k as f64; k],
            penalty,
            floor,
        };
        if state.assignment.iter().any(|&c| !c) {
            state.dirichlet = dirichlet_parameters(&state.assignment, floor)?;
        }
        Ok(state)
    }

    pub fn experts(&self) -> &[VaeExpert] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> Result<&VaeExpert> {
        let len = self.experts.len();
        self.experts.get(i).ok_or(Error::Range {
            what: "expert",
            index: i,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn assignment(&self) -> &[bool] {
        &self.assignment
    }

    pub fn previous_assignment(&self) -> &[bool] {
        &self.previous
    }

    /// `K'`, the number of consumed experts.
    pub fn consumed(&self) -> usize {
        self.assignment.iter().filter(|&&c| c).count()
    }

    pub fn pending(&self) -> Option<usize> {
        self.pending
    }

    pub fn dirichlet(&self) -> &[f64] {
        &self.dirichlet
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Experts frozen at the end of a completed task.
    pub fn committed(&self) -> Vec<bool> {
        self.experts.iter().map(|e| e.is_frozen()).collect()
    }

    pub fn set_weights(&mut self, w: Vec<f64>) -> Result<()> {
        if w.len() != self.experts.len() {
            return Err(Error::dim(format!(
                "{} weights for {} experts",
                w.len(),
                self.experts.len()
            )));
        }
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::contract("mixing weights must lie on the simplex"));
        }
        self.weights = w;
        Ok(())
    }

    /// Adds an expert that starts unconsumed.
    pub fn push_expert(&mut self, expert: VaeExpert) {
        self.assignment.push(expert.is_frozen());
        self.previous.push(expert.is_frozen());
        self.experts.push(expert);
        self.dirichlet.push(0.0);
        self.weights.push(0.0);
    }

    /// Mean ELBO of each expert on each batch; `out[b][i]`.
    pub fn batch_elbos<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        batches: &[Tensor],
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let latent = self.experts[0].latent_dim();
        batches
            .iter()
            .map(|x| {
                let noise = sample_noise(rng, x.rows(), latent);
                Ok(score_samples(&self.experts, store, x, &noise)?
                    .iter()
                    .map(|s| mean(s))
                    .collect())
            })
            .collect()
    }

    /// Scores the new task's batches, marks the chosen expert as consumed
    /// and leaves it pending until [`MixtureState::freeze_pending`].
    pub fn select_and_freeze<R: Rng + ?Sized>(
        &mut self,
        store: &ParamStore,
        batches: &[Tensor],
        rng: &mut R,
    ) -> Result<SelectionReport> {
        if let Some(j) = self.pending {
            return Err(Error::contract(format!(
                "expert {j} is still pending from the previous task"
            )));
        }
        self.previous = self.assignment.clone();
        if self.previous.iter().all(|&c| c) {
            return Err(Error::CapacityExhausted {
                experts: self.experts.len(),
            });
        }
        let per_batch = self.batch_elbos(store, batches, rng)?;
        let log_q = assignment_log_complements(&per_batch, &self.previous, self.penalty)?;
        let chosen = choose_expert(&log_q, &self.previous)?;
        let assignment: Vec<f64> = log_q.iter().map(|q| -q.exp_m1()).collect();
        self.assignment = self.previous.clone();
        self.assignment[chosen] = true;
        self.pending = Some(chosen);
        let k = self.experts.len();
        let elbos: Vec<f64> = (0..k)
            .map(|i| mean(&per_batch.iter().map(|b| b[i]).collect::<Vec<_>>()))
            .collect();
        let selection = inference_probabilities(&elbos)?;
        Ok(SelectionReport {
            elbos,
            assignment,
            chosen,
            selection,
        })
    }

    /// Sets the task's Dirichlet parameters from the committed assignment, so
    /// the pending expert still trains while earlier ones are dropped out.
    pub fn prepare_training(&mut self) -> Result<&[f64]> {
        self.dirichlet = dirichlet_parameters(&self.committed(), self.floor)?;
        Ok(&self.dirichlet)
    }

    pub fn resample_weights<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<&[f64]> {
        self.weights = sample_mixing_weights(&self.dirichlet, rng)?;
        Ok(&self.weights)
    }

    /// Freezes the pending expert; returns its index and parameter digest.
    pub fn freeze_pending(&mut self, store: &mut ParamStore) -> Option<(usize, String)> {
        let j = self.pending.take()?;
        self.experts[j].freeze(store);
        Some((j, self.experts[j].digest(store)))
    }

    /// Mixture ELBO `Σ w_i ELBO_i / Σ w_i` under the current weights.
    pub fn melbo(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        noise: Var,
        beta_star: f64,
    ) -> Result<Var> {
        weighted_objective(g, &self.experts, &self.weights, |e, g| {
            Ok(e.elbo(g, store, x, noise, beta_star)?.elbo)
        })
    }

    /// Test-time choice of one expert for the whole batch.
    pub fn select_expert_for_inference<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x: &Tensor,
        noise: &Tensor,
        mode: InferenceMode,
        rng: &mut R,
    ) -> Result<SelectionReport> {
        let scores = score_samples(&self.experts, store, x, noise)?;
        let elbos: Vec<f64> = scores.iter().map(|s| mean(s)).collect();
        let selection = inference_probabilities(&elbos)?;
        let chosen = pick(&selection, mode, rng);
        Ok(SelectionReport {
            elbos,
            assignment: Vec::new(),
            chosen,
            selection,
        })
    }

    /// Per-sample routing: each row goes to the expert with the largest `v_j`
    /// (or a draw from `v` in sampling mode).
    pub fn route<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x: &Tensor,
        noise: &Tensor,
        mode: InferenceMode,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let scores = score_samples(&self.experts, store, x, noise)?;
        (0..x.rows())
            .map(|b| {
                let l: Vec<f64> = scores.iter().map(|s| s[b]).collect();
                Ok(pick(&inference_probabilities(&l)?, mode, rng))
            })
            .collect()
    }
}
