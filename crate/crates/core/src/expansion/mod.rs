//! Dynamic growth: experts share a frozen sub-encoder and sub-decoder and
//! differ only in their task-specific heads. A new task either reuses the
//! closest expert or adds a fresh one, depending on a novelty score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mlp, ParamId, ParamStore};
use crate::discrete::ClassEncoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::{ExpertArch, VaeExpert};

/// Mean Euclidean distance over all pairs `(probe_i, reconstruction_l)`.
pub fn novelty_score(probe: &Tensor, reconstructions: &Tensor) -> Result<f64> {
    if probe.rows() == 0 || reconstructions.rows() == 0 {
        return Err(Error::contract("novelty score needs a non-empty probe"));
    }
    if probe.cols() != reconstructions.cols() {
        return Err(Error::dim(format!(
            "probe width {} differs from reconstruction width {}",
            probe.cols(),
            reconstructions.cols()
        )));
    }
    let mut total = 0.0;
    for i in 0..probe.rows() {
        let a = probe.row(i);
        for l in 0..reconstructions.rows() {
            let d2: f64 = a
                .iter()
                .zip(reconstructions.row(l))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += d2.sqrt();
        }
    }
    Ok(total / (probe.rows() * reconstructions.rows()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "expert")]
pub enum Decision {
    AddNew,
    Update(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub scores: Vec<f64>,
    pub min_score: f64,
    pub decision: Decision,
}

/// Adds iff every score is strictly above `threshold`; otherwise reuses the
/// lowest-scoring expert (lowest index on ties).
pub fn decide_expansion(scores: &[f64], threshold: f64) -> Result<NoveltyReport> {
    if scores.is_empty() {
        return Err(Error::contract("no experts to compare against"));
    }
    let (best, &min_score) =
        scores.iter().enumerate().fold(
            (0, &scores[0]),
            |acc, (i, s)| if *s < *acc.1 { (i, s) } else { acc },
        );
    let decision = if min_score > threshold {
        Decision::AddNew
    } else {
        Decision::Update(best)
    };
    Ok(NoveltyReport {
        scores: scores.to_vec(),
        min_score,
        decision,
    })
}

/// Task-specific parameters of one expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecificHeads {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub class_encoder: Option<ClassEncoder>,
}

impl SpecificHeads {
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.params();
        ids.extend(self.decoder.params());
        if let Some(c) = &self.class_encoder {
            ids.extend(c.network().params());
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPool {
    arch: ExpertArch,
    shared_encoder: Mlp,
    shared_decoder: Mlp,
    heads: Vec<SpecificHeads>,
    threshold: f64,
    probe_size: usize,
    shared_frozen: bool,
}

impl ExpansionPool {
    /// Builds the shared sub-networks; no expert exists yet. The first
    /// `⌊n/2⌋` of the `n` encoder layers and the last `⌊n/2⌋` decoder layers
    /// are shared.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        arch: &ExpertArch,
        threshold: f64,
        probe_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if arch.hidden.is_empty() {
            return Err(Error::config(
                "expansion needs at least one hidden layer to share",
            ));
        }
        if !(threshold >= 0.0) || probe_size == 0 {
            return Err(Error::config(
                "novelty threshold must be non-negative and the probe non-empty",
            ));
        }
        let enc = arch.encoder_widths();
        let dec = arch.decoder_widths();
        let split = (enc.len() - 1) / 2;
        let shared_encoder = Mlp::new(
            store,
            "shared.encoder",
            &enc[..=split],
            Activation::LeakyRelu,
            Activation::LeakyRelu,
            rng,
        )?;
        let dec_split = dec.len() - 1 - split;
        let shared_decoder = Mlp::new(
            store,
            "shared.decoder",
            &dec[dec_split..],
            Activation::LeakyRelu,
            arch.output,
            rng,
        )?;
        Ok(Self {
            arch: arch.clone(),
            shared_encoder,
            shared_decoder,
            heads: Vec::new(),
            threshold,
            probe_size,
            shared_frozen: false,
        })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn probe_size(&self) -> usize {
        self.probe_size
    }

    pub fn shared_frozen(&self) -> bool {
        self.shared_frozen
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut ids = self.shared_encoder.params();
        ids.extend(self.shared_decoder.params());
        ids
    }

    pub fn heads(&self, index: usize) -> Result<&SpecificHeads> {
        self.heads.get(index).ok_or(Error::Range {
            what: "expert",
            index,
            len: self.heads.len(),
        })
    }

    /// Adds fresh specific heads and returns the new expert's index.
    pub fn add_expert<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<usize> {
        let i = self.heads.len();
        let enc = self.arch.encoder_widths();
        let dec = self.arch.decoder_widths();
        let split = (enc.len() - 1) / 2;
        let dec_split = dec.len() - 1 - split;
        let encoder = Mlp::new(
            store,
            &format!("expert{i}.encoder"),
            &enc[split..],
            Activation::LeakyRelu,
            Activation::Identity,
            rng,
        )?;
        let decoder = Mlp::new(
            store,
            &format!("expert{i}.decoder"),
            &dec[..=dec_split],
            Activation::LeakyRelu,
            Activation::LeakyRelu,
            rng,
        )?;
        let class_encoder = match self.arch.class_encoder_widths() {
            Some(w) => Some(ClassEncoder::new(
                store,
                &format!("expert{i}.classifier"),
                &w,
                rng,
            )?),
            None => None,
        };
        self.heads.push(SpecificHeads {
            encoder,
            decoder,
            class_encoder,
        });
        Ok(i)
    }

    /// Expert `index` as shared sub-encoder → head, head → shared sub-decoder.
    pub fn compose_expert(&self, index: usize) -> Result<VaeExpert> {
        let h = self.heads(index)?;
        VaeExpert::from_parts(
            index,
            self.arch.latent_dim,
            self.shared_encoder.then(&h.encoder)?,
            h.decoder.then(&self.shared_decoder)?,
            h.class_encoder.clone(),
        )
    }

    /// Parameters that may change while expert `index` learns a task.
    pub fn trainable_params(&self, index: usize) -> Result<Vec<ParamId>> {
        let mut ids = self.heads(index)?.params();
        if !self.shared_frozen {
            ids.extend(self.shared_params());
        }
        Ok(ids)
    }

    /// Permanently freezes the shared sub-networks.
    pub fn freeze_shared(&mut self, store: &mut ParamStore) {
        self.shared_frozen = true;
        for id in self.shared_params() {
            store.set_frozen(id, true);
        }
    }

    pub fn shared_digest(&self, store: &ParamStore) -> String {
        store.digest(&self.shared_params())
    }

    /// Novelty of `probe` against every existing expert, and the decision.
    pub fn decide(&self, store: &ParamStore, probe: &Tensor) -> Result<NoveltyReport> {
        let scores = (0..self.heads.len())
            .map(|k| {
                let e = self.compose_expert(k)?;
                novelty_score(probe, &e.reconstruct(store, probe, None)?)
            })
            .collect::<Result<Vec<_>>>()?;
        decide_expansion(&scores, self.threshold)
    }
}
