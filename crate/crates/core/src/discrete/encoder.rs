use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Mlp, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `q(d|x)`: a network ending in a softmax over the classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEncoder {
    network: Mlp,
}

impl ClassEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_network(Mlp::new(
            store,
            name,
            widths,
            Activation::LeakyRelu,
            Activation::Softmax,
            rng,
        )?)
    }

    pub fn from_network(network: Mlp) -> Result<Self> {
        if network.final_activation() != Activation::Softmax {
            return Err(Error::config("class encoder must end in a softmax"));
        }
        if network.output_width() < 2 {
            return Err(Error::config("class encoder needs at least two classes"));
        }
        Ok(Self { network })
    }

    pub fn network(&self) -> &Mlp {
        &self.network
    }

    pub fn classes(&self) -> usize {
        self.network.output_width()
    }

    /// `d'` rows, each a probability vector.
    pub fn probabilities(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.network.forward(g, store, x)
    }

    /// `log d'` rows, computed from the logits so they stay finite.
    pub fn log_probabilities(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let logits = self.network.forward_logits(g, store, x)?;
        Ok(g.log_softmax(logits))
    }

    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.network.eval(store, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

/// Argmax of each row of `probs`; ties go to the lowest class.
pub fn classify(probs: &Tensor) -> Vec<Classification> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let label = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &p)| if p > row[best] { i } else { best });
            Classification {
                label,
                probabilities: row.to_vec(),
            }
        })
        .collect()
}
