use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::{sample_noise, VaeExpert};

/// Numerical check of the mixture bounds on one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Batch-mean ELBO per expert.
    pub elbos: Vec<f64>,
    /// Batch-mean importance-sampled `log p_i(x)` per expert.
    pub log_likelihoods: Vec<f64>,
    /// Three standard errors of the paired difference, per expert.
    pub slack: Vec<f64>,
    /// `log Σ w_i exp(L_i)`.
    pub log_mixture: f64,
    /// `Σ w_i L_i`.
    pub weighted_elbo: f64,
    pub max_elbo: f64,
    /// `log Σ w_i p̂_i(x)`.
    pub log_mixture_likelihood: f64,
    pub passed: bool,
}

impl BoundReport {
    /// `max L - log Σ w exp(L)`; non-negative when the max bound holds.
    pub fn max_margin(&self) -> f64 {
        self.max_elbo - self.log_mixture
    }
}

/// Checks, for weights `w` on the simplex:
///
/// * `log Σ w_i exp(L_i) <= max_i L_i` and `Σ w_i L_i <= max_i L_i`;
/// * `L_i <= log p_i(x)` per expert, up to Monte-Carlo slack, with `log p_i`
///   estimated from `draws` importance samples per data point;
/// * `log Σ w_i exp(L_i) <= log Σ w_i p̂_i(x)` up to the largest slack.
pub fn theorem_bound_check<R: Rng + ?Sized>(
    experts: &[VaeExpert],
    weights: &[f64],
    store: &ParamStore,
    x: &Tensor,
    draws: usize,
    rng: &mut R,
) -> Result<BoundReport> {
    if experts.is_empty() || experts.len() != weights.len() {
        return Err(Error::dim(format!(
            "{} weights for {} experts",
            weights.len(),
            experts.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract("weights must lie on the simplex"));
    }
    if draws < 2 || x.rows() < 2 {
        return Err(Error::contract(
            "bound check needs at least two draws and two samples",
        ));
    }
    let b = x.rows();
    let mut elbos = Vec::with_capacity(experts.len());
    let mut lls = Vec::with_capacity(experts.len());
    let mut slack = Vec::with_capacity(experts.len());
    let mut ok = true;
    for e in experts {
        let latent = e.latent_dim();
        // Two independent sets of draws: one for the ELBO, one for p(x).
        let mut elbo_sum = vec![0.0; b];
        let mut is_logs = vec![Vec::with_capacity(draws); b];
        for _ in 0..draws {
            let w = e.log_importance_weights(store, x, &sample_noise(rng, b, latent))?;
            elbo_sum.iter_mut().zip(&w).for_each(|(s, v)| *s += v);
            let w = e.log_importance_weights(store, x, &sample_noise(rng, b, latent))?;
            is_logs.iter_mut().zip(w).for_each(|(s, v)| s.push(v));
        }
        let per_elbo: Vec<f64> = elbo_sum.iter().map(|s| s / draws as f64).collect();
        let per_ll: Vec<f64> = is_logs
            .iter()
            .map(|l| log_sum_exp(l) - (draws as f64).ln())
            .collect();
        let diffs: Vec<f64> = per_ll.iter().zip(&per_elbo).map(|(p, l)| p - l).collect();
        let mean_diff = diffs.iter().sum::<f64>() / b as f64;
        let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (b - 1) as f64;
        let s = 3.0 * (var / b as f64).sqrt();
        ok &= mean_diff >= -s;
        elbos.push(per_elbo.iter().sum::<f64>() / b as f64);
        lls.push(per_ll.iter().sum::<f64>() / b as f64);
        slack.push(s);
    }
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let with = |vals: &[f64]| {
        log_sum_exp(
            &vals
                .iter()
                .zip(&log_w)
                .map(|(v, lw)| v + lw)
                .collect::<Vec<_>>(),
        )
    };
    let log_mixture = with(&elbos);
    let log_mixture_likelihood = with(&lls);
    let weighted_elbo: f64 = elbos.iter().zip(weights).map(|(l, w)| l * w).sum();
    let max_elbo = elbos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * max_elbo.abs().max(1.0);
    ok &= log_mixture <= max_elbo + tol;
    ok &= weighted_elbo <= max_elbo + tol;
    let max_slack = slack.iter().cloned().fold(0.0, f64::max);
    ok &= log_mixture <= log_mixture_likelihood + max_slack + tol;
    Ok(BoundReport {
        elbos,
        log_likelihoods: lls,
        slack,
        log_mixture,
        weighted_elbo,
        max_elbo,
        log_mixture_likelihood,
        passed: ok,
    })
}
