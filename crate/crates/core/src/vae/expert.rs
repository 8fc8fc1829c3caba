use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Mlp, ParamId, ParamStore, Var};
use crate::discrete::ClassEncoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::schedule::DisentangleSchedule;

/// `½·ln(2π)`, the per-dimension constant of a unit-variance Gaussian.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Layer widths for one expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertArch {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Class count of the discrete latent, when the expert has one.
    pub classes: Option<usize>,
    pub output: Activation,
}

impl ExpertArch {
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(2 * self.latent_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim + self.classes.unwrap_or(0)];
        w.extend(self.hidden.iter().rev());
        w.push(self.input_dim);
        w
    }

    pub fn class_encoder_widths(&self) -> Option<Vec<usize>> {
        self.classes.map(|c| {
            let mut w = vec![self.input_dim];
            w.extend(&self.hidden);
            w.push(c);
            w
        })
    }
}

/// One mixture component: a Gaussian-latent encoder/decoder pair and an
/// optional class encoder for the discrete latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeExpert {
    index: usize,
    latent_dim: usize,
    encoder: Mlp,
    decoder: Mlp,
    class_encoder: Option<ClassEncoder>,
    frozen: bool,
}

/// Batch-mean ELBO pieces still attached to the graph.
#[derive(Clone, Copy, Debug)]
pub struct ElboNodes {
    pub reconstruction: Var,
    pub kl: Var,
    pub elbo: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `E[log p(x|z)]`, nats per sample.
    pub reconstruction: f64,
    /// `KL(q(z|x) || N(0, I))`, nats per sample.
    pub kl: f64,
    pub elbo: f64,
}

impl ElboNodes {
    pub fn terms(&self, g: &Graph) -> ElboTerms {
        ElboTerms {
            reconstruction: g.scalar(self.reconstruction),
            kl: g.scalar(self.kl),
            elbo: g.scalar(self.elbo),
        }
    }
}

impl VaeExpert {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        index: usize,
        arch: &ExpertArch,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Mlp::new(
            store,
            &format!("expert{index}.encoder"),
            &arch.encoder_widths(),
            Activation::LeakyRelu,
            Activation::Identity,
            rng,
        )?;
        let decoder = Mlp::new(
            store,
            &format!("expert{index}.decoder"),
            &arch.decoder_widths(),
            Activation::LeakyRelu,
            arch.output,
            rng,
        )?;
        let class_encoder = match arch.class_encoder_widths() {
            Some(widths) => Some(ClassEncoder::new(
                store,
                &format!("expert{index}.classifier"),
                &widths,
                rng,
            )?),
            None => None,
        };
        Self::from_parts(index, arch.latent_dim, encoder, decoder, class_encoder)
    }

    pub fn from_parts(
        index: usize,
        latent_dim: usize,
        encoder: Mlp,
        decoder: Mlp,
        class_encoder: Option<ClassEncoder>,
    ) -> Result<Self> {
        if encoder.output_width() != 2 * latent_dim {
            return Err(Error::dim(format!(
                "encoder outputs {} values, need 2 x latent width {latent_dim}",
                encoder.output_width()
            )));
        }
        let classes = class_encoder.as_ref().map_or(0, |c| c.classes());
        if decoder.input_width() != latent_dim + classes {
            return Err(Error::dim(format!(
                "decoder takes width {}, need latent {latent_dim} + classes {classes}",
                decoder.input_width()
            )));
        }
        if decoder.output_width() != encoder.input_width() {
            return Err(Error::dim(format!(
                "decoder emits width {} but encoder reads {}",
                decoder.output_width(),
                encoder.input_width()
            )));
        }
        if let Some(c) = &class_encoder {
            if c.network().input_width() != encoder.input_width() {
                return Err(Error::dim("class encoder input width differs from encoder"));
            }
        }
        Ok(Self {
            index,
            latent_dim,
            encoder,
            decoder,
            class_encoder,
            frozen: false,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn class_encoder(&self) -> Option<&ClassEncoder> {
        self.class_encoder.as_ref()
    }

    pub fn class_encoder_mut(&mut self) -> Option<&mut ClassEncoder> {
        self.class_encoder.as_mut()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Every parameter the expert reads, each listed once.
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.params();
        ids.extend(self.decoder.params());
        if let Some(c) = &self.class_encoder {
            ids.extend(c.network().params());
        }
        let mut seen = std::collections::HashSet::new();
        ids.retain(|id| seen.insert(*id));
        ids
    }

    /// Marks the expert and all of its parameters immutable.
    pub fn freeze(&mut self, store: &mut ParamStore) {
        self.frozen = true;
        for id in self.params() {
            store.set_frozen(id, true);
        }
    }

    pub fn digest(&self, store: &ParamStore) -> String {
        store.digest(&self.params())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let w = g.value(x).cols();
        if w != self.input_dim() {
            return Err(Error::dim(format!(
                "expert {} reads width {}, got {w}",
                self.index,
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Posterior mean and log-variance, each `[batch, latent]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        self.check_input(g, x)?;
        let h = self.encoder.forward(g, store, x)?;
        let d = self.latent_dim;
        Ok((g.slice_cols(h, 0, d)?, g.slice_cols(h, d, 2 * d)?))
    }

    /// Decoder mean; `condition` is the discrete code appended to `z` for
    /// experts that have a class encoder.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        condition: Option<Var>,
    ) -> Result<Var> {
        let input = match (condition, &self.class_encoder) {
            (Some(d), Some(_)) => g.concat_cols(z, d)?,
            (None, None) => z,
            (None, Some(_)) => {
                return Err(Error::contract(format!(
                    "expert {} decodes (z, d); no discrete code given",
                    self.index
                )))
            }
            (Some(_), None) => {
                return Err(Error::contract(format!(
                    "expert {} has no discrete latent",
                    self.index
                )))
            }
        };
        self.decoder.forward(g, store, input)
    }

    /// `E[log p(x|z)] - beta_star * KL`, batch-averaged. `beta_star = 1` is the plain ELBO.
    pub fn elbo(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        noise: Var,
        beta_star: f64,
    ) -> Result<ElboNodes> {
        if !(beta_star >= 0.0) {
            return Err(Error::contract(format!(
                "beta* must be non-negative, got {beta_star}"
            )));
        }
        let (u, lv) = self.encode(g, store, x)?;
        let z = reparameterize(g, u, lv, noise)?;
        let mean = self.decode(g, store, z, None)?;
        let rec = gaussian_log_likelihood(g, x, mean)?;
        let reconstruction = g.mean(rec);
        let kl = gaussian_kl(g, u, lv)?;
        let elbo = if beta_star == 1.0 {
            g.sub(reconstruction, kl)?
        } else {
            let weighted = g.scale(kl, beta_star);
            g.sub(reconstruction, weighted)?
        };
        Ok(ElboNodes {
            reconstruction,
            kl,
            elbo,
        })
    }

    /// `E[log p(x|z)] - gamma * |KL - C(progress)|` with the batch-mean KL.
    pub fn disentangled_objective(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        noise: Var,
        schedule: &DisentangleSchedule,
    ) -> Result<Var> {
        let nodes = self.elbo(g, store, x, noise, 1.0)?;
        let gap = g.add_scalar(nodes.kl, -schedule.capacity());
        let gap = g.abs(gap);
        let penalty = g.scale(gap, schedule.gamma);
        g.sub(nodes.reconstruction, penalty)
    }

    /// Decoder mean for `x`, clamped to `[0, 1]`. Without `noise` the
    /// posterior mean is decoded.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        x: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (u, lv) = self.encode(&mut g, store, xv)?;
        let z = match noise {
            Some(n) => {
                let nv = g.constant(n.clone());
                reparameterize(&mut g, u, lv, nv)?
            }
            None => u,
        };
        let cond = self.discrete_code(&mut g, store, xv)?;
        let out = self.decode(&mut g, store, z, cond)?;
        Ok(g.value(out).map(|p| p.clamp(0.0, 1.0)))
    }

    /// Class-encoder output `d'` for a batch; `None` for plain experts.
    pub fn class_code(&self, store: &ParamStore, x: &Tensor) -> Result<Option<Tensor>> {
        match &self.class_encoder {
            Some(c) => Ok(Some(c.predict(store, x)?)),
            None => Ok(None),
        }
    }

    /// Decodes latent rows directly, clamped to `[0, 1]`. Conditional
    /// experts take `code` as their discrete input (uniform when absent).
    pub fn decode_latents(
        &self,
        store: &ParamStore,
        z: &Tensor,
        code: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let cond = match (&self.class_encoder, code) {
            (Some(_), Some(d)) => Some(g.constant(d.clone())),
            (Some(c), None) => Some(g.constant(Tensor::full(
                &[z.rows(), c.classes()],
                1.0 / c.classes() as f64,
            ))),
            (None, Some(_)) => {
                return Err(Error::contract(format!(
                    "expert {} has no discrete latent",
                    self.index
                )))
            }
            (None, None) => None,
        };
        let out = self.decode(&mut g, store, zv, cond)?;
        Ok(g.value(out).map(|p| p.clamp(0.0, 1.0)))
    }

    /// Posterior means for a batch.
    pub fn latent_means(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (u, _) = self.encode(&mut g, store, xv)?;
        Ok(g.value(u).clone())
    }

    fn discrete_code(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Option<Var>> {
        match &self.class_encoder {
            Some(c) => Ok(Some(c.probabilities(g, store, x)?)),
            None => Ok(None),
        }
    }

    /// Per-sample ELBO estimates with one latent draw each. Conditional
    /// experts feed the class encoder's probabilities to the decoder and
    /// include the categorical KL term.
    pub fn per_sample_elbo(
        &self,
        store: &ParamStore,
        x: &Tensor,
        noise: &Tensor,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let nv = g.constant(noise.clone());
        let (u, lv) = self.encode(&mut g, store, xv)?;
        let z = reparameterize(&mut g, u, lv, nv)?;
        let kl = gaussian_kl_per_sample(&mut g, u, lv)?;
        let (cond, kl_d) = match &self.class_encoder {
            Some(c) => {
                let probs = c.probabilities(&mut g, store, xv)?;
                let kl_d = crate::discrete::categorical_kl_uniform_per_sample(&mut g, probs)?;
                (Some(probs), Some(kl_d))
            }
            None => (None, None),
        };
        let mean = self.decode(&mut g, store, z, cond)?;
        let rec = gaussian_log_likelihood(&mut g, xv, mean)?;
        let mut elbo = g.sub(rec, kl)?;
        if let Some(k) = kl_d {
            elbo = g.sub(elbo, k)?;
        }
        Ok(g.value(elbo).data().to_vec())
    }

    /// Per-sample `log p(x|z) + log p(z) - log q(z|x)` at `z = u + noise·σ`.
    /// Averaging `exp` of these over many draws estimates `p(x)`; their plain
    /// mean is the ELBO. Conditional experts hold `d` at the class-encoder
    /// output and subtract its KL term.
    pub fn log_importance_weights(
        &self,
        store: &ParamStore,
        x: &Tensor,
        noise: &Tensor,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let nv = g.constant(noise.clone());
        let (u, lv) = self.encode(&mut g, store, xv)?;
        let z = reparameterize(&mut g, u, lv, nv)?;
        let (cond, kl_d) = match &self.class_encoder {
            Some(c) => {
                let probs = c.probabilities(&mut g, store, xv)?;
                let kl_d = crate::discrete::categorical_kl_uniform_per_sample(&mut g, probs)?;
                (Some(probs), Some(kl_d))
            }
            None => (None, None),
        };
        let mean = self.decode(&mut g, store, z, cond)?;
        let rec = gaussian_log_likelihood(&mut g, xv, mean)?;
        let z2 = g.square(z);
        let n2 = g.square(nv);
        let a = g.sub(n2, z2)?;
        let b = g.add(a, lv)?;
        let s = g.sum_cols(b)?;
        let ratio = g.scale(s, 0.5);
        let mut w = g.add(rec, ratio)?;
        if let Some(k) = kl_d {
            w = g.sub(w, k)?;
        }
        Ok(g.value(w).data().to_vec())
    }

    /// Batch-mean ELBO terms under the plain objective.
    pub fn elbo_terms(&self, store: &ParamStore, x: &Tensor, noise: &Tensor) -> Result<ElboTerms> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let nv = g.constant(noise.clone());
        Ok(self.elbo(&mut g, store, xv, nv, 1.0)?.terms(&g))
    }
}

/// `z = u + noise * exp(logvar / 2)`.
pub fn reparameterize(g: &mut Graph, mean: Var, logvar: Var, noise: Var) -> Result<Var> {
    let (a, b, c) = (
        g.value(mean).shape(),
        g.value(logvar).shape(),
        g.value(noise).shape(),
    );
    if a != b || a != c {
        return Err(Error::dim(format!(
            "reparameterize: mean {a:?}, log-variance {b:?} and noise {c:?} must match"
        )));
    }
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let spread = g.mul(noise, sigma)?;
    g.add(mean, spread)
}

/// `½ Σ_j (exp(lv_j) + u_j² - 1 - lv_j)` per row.
pub fn gaussian_kl_per_sample(g: &mut Graph, mean: Var, logvar: Var) -> Result<Var> {
    if g.value(mean).shape() != g.value(logvar).shape() {
        return Err(Error::dim(
            "gaussian_kl: mean and log-variance shapes differ",
        ));
    }
    let var = g.exp(logvar);
    let sq = g.square(mean);
    let a = g.add(var, sq)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_cols(c)?;
    Ok(g.scale(s, 0.5))
}

/// Batch-mean KL divergence from `N(mean, exp(logvar))` to `N(0, I)`.
pub fn gaussian_kl(g: &mut Graph, mean: Var, logvar: Var) -> Result<Var> {
    let per = gaussian_kl_per_sample(g, mean, logvar)?;
    Ok(g.mean(per))
}

/// Unit-variance Gaussian log-density of `x` around `mean`, per row:
/// `-½‖x - mean‖² - (D/2)·ln 2π`.
pub fn gaussian_log_likelihood(g: &mut Graph, x: Var, mean: Var) -> Result<Var> {
    let d = g.value(x).cols() as f64;
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff);
    let s = g.sum_cols(sq)?;
    let half = g.scale(s, -0.5);
    Ok(g.add_scalar(half, -d * HALF_LN_2PI))
}
