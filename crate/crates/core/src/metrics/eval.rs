use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::discrete::classify;
use crate::error::{Error, Result};
use crate::metrics::image::mse;
use crate::tensor::Tensor;
use crate::vae::{sample_noise, VaeExpert};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Delta {
    /// Per-sample mean squared reconstruction error.
    Mse,
    /// Per-sample classification hit (1 or 0).
    Accuracy,
}

/// `(1/N) Σ δ(x_i, f(x_i))` for one expert on one batch.
pub fn transfer_score(
    expert: &VaeExpert,
    store: &ParamStore,
    x: &Tensor,
    labels: Option<&[usize]>,
    delta: Delta,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::contract("transfer score needs a non-empty batch"));
    }
    match delta {
        Delta::Mse => {
            let r = expert.reconstruct(store, x, None)?;
            let mut total = 0.0;
            for i in 0..x.rows() {
                total += mse(x.row(i), r.row(i))?;
            }
            Ok(total / x.rows() as f64)
        }
        Delta::Accuracy => {
            let labels = labels.ok_or_else(|| Error::contract("accuracy needs labels"))?;
            if labels.len() != x.rows() {
                return Err(Error::contract(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    x.rows()
                )));
            }
            let probs = expert.class_code(store, x)?.ok_or_else(|| {
                Error::contract(format!("expert {} has no class encoder", expert.index()))
            })?;
            let hits = classify(&probs)
                .iter()
                .zip(labels)
                .filter(|(c, &y)| c.label == y)
                .count();
            Ok(hits as f64 / x.rows() as f64)
        }
    }
}

/// Scores of expert `expert` on task `task` at increasing step stamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCurve {
    pub task: usize,
    pub expert: usize,
    pub delta: Delta,
    steps: Vec<u64>,
    scores: Vec<f64>,
}

impl TransferCurve {
    pub fn new(task: usize, expert: usize, delta: Delta) -> Self {
        Self {
            task,
            expert,
            delta,
            steps: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn push(&mut self, step: u64, score: f64) -> Result<()> {
        if self.steps.last().is_some_and(|&s| step <= s) {
            return Err(Error::contract(format!(
                "step {step} does not follow {:?}",
                self.steps.last()
            )));
        }
        self.steps.push(step);
        self.scores.push(score);
        Ok(())
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// True when no value rises more than `slack` (relative) above the lowest
/// value seen before it.
pub fn non_increasing_with_slack(values: &[f64], slack: f64) -> bool {
    let mut best = f64::INFINITY;
    for &v in values {
        if v > best * (1.0 + slack) {
            return false;
        }
        best = best.min(v);
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllEstimate {
    /// Mean of `-ELBO` over samples and draws, in nats.
    pub mean: f64,
    /// Monte-Carlo standard error of the mean over draws.
    pub std_error: f64,
}

/// `-ELBO` averaged over the batch, using `draws` latent draws.
pub fn negative_log_likelihood<R: Rng + ?Sized>(
    expert: &VaeExpert,
    store: &ParamStore,
    x: &Tensor,
    draws: usize,
    rng: &mut R,
) -> Result<NllEstimate> {
    if draws == 0 {
        return Err(Error::contract("need at least one draw"));
    }
    let per_draw: Vec<f64> = (0..draws)
        .map(|_| {
            let noise = sample_noise(rng, x.rows(), expert.latent_dim());
            let s = expert.per_sample_elbo(store, x, &noise)?;
            Ok(-s.iter().sum::<f64>() / s.len() as f64)
        })
        .collect::<Result<_>>()?;
    let mean = per_draw.iter().sum::<f64>() / draws as f64;
    let std_error = if draws > 1 {
        let var = per_draw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        (var / draws as f64).sqrt()
    } else {
        0.0
    };
    Ok(NllEstimate { mean, std_error })
}

fn single(x: &[f64]) -> Result<Tensor> {
    Tensor::matrix(1, x.len(), x.to_vec())
}

fn lerp_rows(a: &Tensor, b: &Tensor, steps: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(steps * a.cols());
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        data.extend(
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (1.0 - t) * p + t * q),
        );
    }
    Tensor::matrix(steps, a.cols(), data)
}

/// Frames decoded along the straight line between the posterior means of
/// `a` and `b`; the first and last frames are their reconstructions.
pub fn latent_interpolate(
    expert: &VaeExpert,
    store: &ParamStore,
    a: &[f64],
    b: &[f64],
    steps: usize,
) -> Result<Tensor> {
    if steps < 2 {
        return Err(Error::contract("interpolation needs at least two steps"));
    }
    let (xa, xb) = (single(a)?, single(b)?);
    let z = lerp_rows(
        &expert.latent_means(store, &xa)?,
        &expert.latent_means(store, &xb)?,
        steps,
    )?;
    let code = match (
        expert.class_code(store, &xa)?,
        expert.class_code(store, &xb)?,
    ) {
        (Some(da), Some(db)) => Some(lerp_rows(&da, &db, steps)?),
        _ => None,
    };
    expert.decode_latents(store, &z, code.as_ref())
}

/// Frames decoded while latent coordinate `dim` of `x`'s posterior mean
/// sweeps `range` and the other coordinates stay fixed.
pub fn latent_traverse(
    expert: &VaeExpert,
    store: &ParamStore,
    x: &[f64],
    dim: usize,
    range: (f64, f64),
    steps: usize,
) -> Result<Tensor> {
    if dim >= expert.latent_dim() {
        return Err(Error::Range {
            what: "latent dimension",
            index: dim,
            len: expert.latent_dim(),
        });
    }
    if steps < 2 {
        return Err(Error::contract("traversal needs at least two steps"));
    }
    let xa = single(x)?;
    let base = expert.latent_means(store, &xa)?;
    let d = expert.latent_dim();
    let mut z = Vec::with_capacity(steps * d);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let mut row = base.data().to_vec();
        row[dim] = range.0 + (range.1 - range.0) * t;
        z.extend(row);
    }
    let z = Tensor::matrix(steps, d, z)?;
    let code = expert
        .class_code(store, &xa)?
        .map(|c| Tensor::matrix(steps, c.cols(), c.data().repeat(steps)))
        .transpose()?;
    expert.decode_latents(store, &z, code.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::vae::ExpertArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn expert(classes: Option<usize>) -> (ParamStore, VaeExpert) {
        let mut s = ParamStore::new();
        let arch = ExpertArch {
            input_dim: 6,
            latent_dim: 3,
            hidden: vec![5],
            classes,
            output: Activation::Logistic,
        };
        let e = VaeExpert::new(&mut s, 0, &arch, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        (s, e)
    }

    #[test]
    fn trend_test() {
        assert!(non_increasing_with_slack(&[1.0, 0.8, 0.82, 0.5], 0.05));
        assert!(!non_increasing_with_slack(&[1.0, 0.8, 0.9], 0.05));
        assert!(non_increasing_with_slack(&[], 0.05));
    }

    #[test]
    fn curve_steps_must_increase() {
        let mut c = TransferCurve::new(0, 1, Delta::Mse);
        c.push(1, 0.3).unwrap();
        assert!(c.push(1, 0.2).is_err());
        c.push(5, 0.2).unwrap();
        assert_eq!(c.scores(), &[0.3, 0.2]);
    }

    #[test]
    fn accuracy_requires_labels() {
        let (s, e) = expert(Some(3));
        let x = Tensor::full(&[2, 6], 0.5);
        assert!(transfer_score(&e, &s, &x, None, Delta::Accuracy).is_err());
        let acc = transfer_score(&e, &s, &x, Some(&[0, 1]), Delta::Accuracy).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn interpolation_endpoints_are_reconstructions() {
        for classes in [None, Some(3)] {
            let (s, e) = expert(classes);
            let a = [0.1, 0.9, 0.2, 0.8, 0.3, 0.7];
            let b = [0.6, 0.6, 0.1, 0.0, 1.0, 0.4];
            let frames = latent_interpolate(&e, &s, &a, &b, 2).unwrap();
            let ra = e.reconstruct(&s, &single(&a).unwrap(), None).unwrap();
            let rb = e.reconstruct(&s, &single(&b).unwrap(), None).unwrap();
            assert_eq!(frames.row(0), ra.row(0));
            assert_eq!(frames.row(1), rb.row(0));
        }
    }

    #[test]
    fn degenerate_traversal_repeats_one_frame() {
        let (s, e) = expert(None);
        let x = [0.5; 6];
        let f = latent_traverse(&e, &s, &x, 1, (0.0, 0.0), 4).unwrap();
        for r in 1..4 {
            assert_eq!(f.row(r), f.row(0));
        }
        assert!(matches!(
            latent_traverse(&e, &s, &x, 3, (-3.0, 3.0), 4),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn nll_is_negated_elbo() {
        let (s, e) = expert(None);
        let x = Tensor::full(&[3, 6], 0.4);
        let n = negative_log_likelihood(&e, &s, &x, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let noise = sample_noise(&mut ChaCha8Rng::seed_from_u64(1), 3, 3);
        let elbo = e.elbo_terms(&s, &x, &noise).unwrap().elbo;
        assert!((n.mean + elbo).abs() < 1e-12);
    }
}
