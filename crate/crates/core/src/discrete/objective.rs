use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::discrete::gumbel::{relax, sample_gumbel, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::mixture::weighted_objective;
use crate::tensor::Tensor;
use crate::vae::{
    gaussian_kl_per_sample, gaussian_log_likelihood, reparameterize, sample_noise, VaeExpert,
};

/// What the decoder receives next to `z`.
#[derive(Clone, Copy, Debug)]
pub enum DecoderCode<'a> {
    /// Ground-truth one-hot labels.
    Labels(&'a Tensor),
    /// The class encoder's `d'` itself.
    Probabilities,
    /// A Gumbel-softmax relaxation of `d'`.
    Relaxed { noise: &'a Tensor, temperature: f64 },
}

/// `Σ_k d'_k (log d'_k + log C)` per row: KL from `d'` to the uniform prior.
pub fn categorical_kl_uniform_per_sample(g: &mut Graph, probabilities: Var) -> Result<Var> {
    let classes = g.value(probabilities).cols() as f64;
    let floored = g.clamp_min(probabilities, PROB_FLOOR);
    let logp = g.log(floored);
    let shifted = g.add_scalar(logp, classes.ln());
    let terms = g.mul(probabilities, shifted)?;
    g.sum_cols(terms)
}

fn class_encoder(expert: &VaeExpert) -> Result<&crate::discrete::ClassEncoder> {
    expert
        .class_encoder()
        .ok_or_else(|| Error::contract(format!("expert {} has no class encoder", expert.index())))
}

fn check_labels(expert: &VaeExpert, x: &Tensor, y: &Tensor) -> Result<()> {
    let classes = class_encoder(expert)?.classes();
    if y.shape().len() != 2 || y.cols() != classes {
        return Err(Error::contract(format!(
            "labels have shape {:?}, expert {} has {classes} classes",
            y.shape(),
            expert.index()
        )));
    }
    if y.rows() != x.rows() {
        return Err(Error::contract(format!(
            "{} labels for {} samples",
            y.rows(),
            x.rows()
        )));
    }
    for r in 0..y.rows() {
        let row = y.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// Batch-mean `E[log p(x|z,d)] - KL_z [- KL_d]` for an expert with a class encoder.
pub fn conditional_elbo(
    expert: &VaeExpert,
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    noise: Var,
    code: DecoderCode<'_>,
    include_kl_d: bool,
) -> Result<Var> {
    let enc = class_encoder(expert)?;
    let (u, lv) = expert.encode(g, store, x)?;
    let z = reparameterize(g, u, lv, noise)?;
    let probs = enc.probabilities(g, store, x)?;
    let d = match code {
        DecoderCode::Labels(y) => g.constant(y.clone()),
        DecoderCode::Probabilities => probs,
        DecoderCode::Relaxed { noise, temperature } => relax(g, probs, noise, temperature)?,
    };
    let mean = expert.decode(g, store, z, Some(d))?;
    let rec = gaussian_log_likelihood(g, x, mean)?;
    let kl = gaussian_kl_per_sample(g, u, lv)?;
    let mut per = g.sub(rec, kl)?;
    if include_kl_d {
        let kl_d = categorical_kl_uniform_per_sample(g, probs)?;
        per = g.sub(per, kl_d)?;
    }
    Ok(g.mean(per))
}

/// Labeled ELBO: the decoder sees the true labels, `KL_d` uses the encoder output.
pub fn supervised_elbo(
    expert: &VaeExpert,
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    noise: Var,
    labels: &Tensor,
) -> Result<Var> {
    check_labels(expert, g.value(x), labels)?;
    conditional_elbo(
        expert,
        g,
        store,
        x,
        noise,
        DecoderCode::Labels(labels),
        true,
    )
}

/// Unlabeled ELBO: the decoder sees a relaxed sample of `d'`; no `KL_d` term.
pub fn unlabeled_elbo(
    expert: &VaeExpert,
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    noise: Var,
    gumbel_noise: &Tensor,
    temperature: f64,
) -> Result<Var> {
    let code = DecoderCode::Relaxed {
        noise: gumbel_noise,
        temperature,
    };
    conditional_elbo(expert, g, store, x, noise, code, false)
}

/// Batch-mean categorical cross-entropy of the class encoder against one-hot labels.
pub fn cross_entropy(
    expert: &VaeExpert,
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    labels: &Tensor,
) -> Result<Var> {
    check_labels(expert, g.value(x), labels)?;
    let logp = class_encoder(expert)?.log_probabilities(g, store, x)?;
    let y = g.constant(labels.clone());
    let picked = g.mul(logp, y)?;
    let per = g.sum_cols(picked)?;
    let m = g.mean(per);
    Ok(g.scale(m, -1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct SupervisedLosses {
    /// Weighted supervised ELBO (to be maximized).
    pub elbo: Var,
    /// Weighted cross-entropy (to be minimized).
    pub cross_entropy: Var,
}

/// Both supervised mixture terms on one graph. Training applies them as two
/// separate optimizer steps.
pub fn mixture_supervised_loss(
    experts: &[VaeExpert],
    weights: &[f64],
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    labels: &Tensor,
    noise: Var,
) -> Result<SupervisedLosses> {
    let elbo = weighted_objective(g, experts, weights, |e, g| {
        supervised_elbo(e, g, store, x, noise, labels)
    })?;
    let cross_entropy = weighted_objective(g, experts, weights, |e, g| {
        cross_entropy(e, g, store, x, labels)
    })?;
    Ok(SupervisedLosses {
        elbo,
        cross_entropy,
    })
}

/// A task batch split into labeled and unlabeled parts.
#[derive(Clone, Debug)]
pub struct SemiSupervisedBatch {
    labeled: Tensor,
    labels: Tensor,
    unlabeled: Tensor,
}

impl SemiSupervisedBatch {
    pub fn new(labeled: Tensor, labels: Tensor, unlabeled: Tensor) -> Result<Self> {
        if labeled.rows() != labels.rows() {
            return Err(Error::contract(format!(
                "{} labels for {} labeled samples",
                labels.rows(),
                labeled.rows()
            )));
        }
        if labeled.rows() > 0 && unlabeled.rows() > 0 && labeled.cols() != unlabeled.cols() {
            return Err(Error::dim("labeled and unlabeled samples differ in width"));
        }
        Ok(Self {
            labeled,
            labels,
            unlabeled,
        })
    }

    pub fn labeled(&self) -> &Tensor {
        &self.labeled
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn unlabeled(&self) -> &Tensor {
        &self.unlabeled
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.rows()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled.rows()
    }
}

/// `Σ w_i ELBO_i^unlabeled(x̂) + beta * Σ w_i ELBO_i^supervised(x)`. Latent and
/// Gumbel noise are drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn semi_supervised_loss<R: Rng + ?Sized>(
    experts: &[VaeExpert],
    weights: &[f64],
    g: &mut Graph,
    store: &ParamStore,
    batch: &SemiSupervisedBatch,
    beta: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::contract(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    if beta > 0.0 && batch.labeled_count() == 0 {
        return Err(Error::contract(
            "beta > 0 needs at least one labeled sample",
        ));
    }
    let latent = experts
        .first()
        .ok_or_else(|| Error::contract("mixture has no experts"))?
        .latent_dim();
    let mut total: Option<Var> = None;
    if batch.unlabeled_count() > 0 {
        let n = batch.unlabeled_count();
        let classes = class_encoder(&experts[0])?.classes();
        let x = g.constant(batch.unlabeled.clone());
        let noise = g.constant(sample_noise(rng, n, latent));
        let gumbel = sample_gumbel(rng, n, classes);
        total = Some(weighted_objective(g, experts, weights, |e, g| {
            unlabeled_elbo(e, g, store, x, noise, &gumbel, temperature)
        })?);
    }
    if batch.labeled_count() > 0 && beta > 0.0 {
        let x = g.constant(batch.labeled.clone());
        let noise = g.constant(sample_noise(rng, batch.labeled_count(), latent));
        let sup = weighted_objective(g, experts, weights, |e, g| {
            supervised_elbo(e, g, store, x, noise, &batch.labels)
        })?;
        let sup = g.scale(sup, beta);
        total = Some(match total {
            Some(t) => g.add(t, sup)?,
            None => sup,
        });
    }
    total.ok_or_else(|| Error::contract("semi-supervised batch has nothing to train on"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::vae::ExpertArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ExpertArch {
        ExpertArch {
            input_dim: 5,
            latent_dim: 2,
            hidden: vec![4],
            classes: Some(3),
            output: Activation::Logistic,
        }
    }

    fn one_hot(labels: &[usize], classes: usize) -> Tensor {
        let mut t = Tensor::zeros(&[labels.len(), classes]);
        for (r, &l) in labels.iter().enumerate() {
            t.data_mut()[r * classes + l] = 1.0;
        }
        t
    }

    #[test]
    fn uniform_code_has_zero_kl() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[2, 4], 0.25));
        let k = categorical_kl_uniform_per_sample(&mut g, p).unwrap();
        assert!(g.value(k).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn one_hot_code_kl_is_log_classes() {
        let mut g = Graph::new();
        let p = g.constant(one_hot(&[7], 10));
        let k = categorical_kl_uniform_per_sample(&mut g, p).unwrap();
        assert!((g.value(k).data()[0] - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn label_width_mismatch_is_contract_error() {
        let mut s = ParamStore::new();
        let e = VaeExpert::new(&mut s, 0, &arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 0.5));
        let err = cross_entropy(&e, &mut g, &s, x, &one_hot(&[0, 1], 4)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let not_one_hot = Tensor::full(&[2, 3], 1.0 / 3.0);
        assert!(cross_entropy(&e, &mut g, &s, x, &not_one_hot).is_err());
    }

    #[test]
    fn single_expert_mixture_matches_direct_terms() {
        let mut s = ParamStore::new();
        let e = VaeExpert::new(&mut s, 0, &arch(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let y = one_hot(&[0, 2, 1], 3);
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::matrix(3, 5, (0..15).map(|i| (i % 4) as f64 / 4.0).collect()).unwrap(),
        );
        let n = g.constant(sample_noise(&mut ChaCha8Rng::seed_from_u64(3), 3, 2));
        let mix = mixture_supervised_loss(std::slice::from_ref(&e), &[1.0], &mut g, &s, x, &y, n)
            .unwrap();
        let elbo = supervised_elbo(&e, &mut g, &s, x, n, &y).unwrap();
        let ce = cross_entropy(&e, &mut g, &s, x, &y).unwrap();
        assert_eq!(g.scalar(mix.elbo), g.scalar(elbo));
        assert_eq!(g.scalar(mix.cross_entropy), g.scalar(ce));
    }

    #[test]
    fn semi_supervised_degenerate_splits() {
        let mut s = ParamStore::new();
        let e = VaeExpert::new(&mut s, 0, &arch(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let experts = [e];
        let xl = Tensor::full(&[2, 5], 0.3);
        let y = one_hot(&[1, 2], 3);
        let xu = Tensor::full(&[3, 5], 0.6);

        // No unlabeled samples: beta times the supervised ELBO with the same noise.
        let batch =
            SemiSupervisedBatch::new(xl.clone(), y.clone(), Tensor::zeros(&[0, 5])).unwrap();
        let mut g = Graph::new();
        let v = semi_supervised_loss(
            &experts,
            &[1.0],
            &mut g,
            &s,
            &batch,
            0.5,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = g.constant(xl.clone());
        let n = g.constant(sample_noise(&mut rng, 2, 2));
        let direct = supervised_elbo(&experts[0], &mut g, &s, x, n, &y).unwrap();
        assert!((g.scalar(v) - 0.5 * g.scalar(direct)).abs() < 1e-12);

        // beta = 0: labeled part ignored entirely.
        let batch = SemiSupervisedBatch::new(xl, y, xu.clone()).unwrap();
        let only_unlabeled =
            SemiSupervisedBatch::new(Tensor::zeros(&[0, 5]), Tensor::zeros(&[0, 3]), xu).unwrap();
        let mut g = Graph::new();
        let a = semi_supervised_loss(
            &experts,
            &[1.0],
            &mut g,
            &s,
            &batch,
            0.0,
            0.7,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = semi_supervised_loss(
            &experts,
            &[1.0],
            &mut g,
            &s,
            &only_unlabeled,
            0.0,
            0.7,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(g.scalar(a), g.scalar(b));

        let err = semi_supervised_loss(
            &experts,
            &[1.0],
            &mut g,
            &s,
            &only_unlabeled,
            0.5,
            0.7,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
