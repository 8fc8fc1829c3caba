use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    LeakyRelu,
    Tanh,
    Logistic,
    Softmax,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => g.tanh(x),
            Activation::Logistic => g.sigmoid(x),
            Activation::Softmax => g.softmax(x),
        }
    }
}

/// One affine layer followed by an activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Builds a stack of dense layers with widths `widths[0] -> ... -> widths[n]`.
    /// Weights are Glorot-uniform, biases zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config(format!(
                "{name}: need at least an input and an output width"
            )));
        }
        if hidden == Activation::Softmax {
            return Err(Error::config(format!(
                "{name}: softmax is only allowed on the final layer"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            let weight = store.add(
                format!("{name}.{i}.weight"),
                Tensor::matrix(fan_in, fan_out, w)?,
            );
            let bias = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[fan_out]));
            let activation = if i + 2 == widths.len() {
                output
            } else {
                hidden
            };
            layers.push(Dense {
                weight,
                bias,
                input: fan_in,
                output: fan_out,
                activation,
            });
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output != pair[1].input {
                return Err(Error::dim(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output,
                    i + 1,
                    pair[1].input
                )));
            }
            if pair[0].activation == Activation::Softmax {
                return Err(Error::config(format!("softmax on non-final layer {i}")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("validated non-empty").output
    }

    pub fn final_activation(&self) -> Activation {
        self.layers.last().expect("validated non-empty").activation
    }

    /// Runs `self` and then `next` as one network. Parameters are shared, not copied.
    pub fn then(&self, next: &Mlp) -> Result<Mlp> {
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        Mlp::from_layers(layers)
    }

    /// Layers `range` as their own network, sharing parameters.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Mlp> {
        Mlp::from_layers(self.layers[range].to_vec())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.run(g, store, x, false)
    }

    /// Forward pass that stops before a final softmax, returning its logits.
    pub fn forward_logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.run(g, store, x, true)
    }

    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, skip_softmax: bool) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.input_width() {
            return Err(Error::dim(format!(
                "layer 0 expects input width {}, got {width}",
                self.input_width()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            let z = g
                .matmul(h, w)
                .map_err(|e| Error::dim(format!("layer {i}: {e}")))?;
            h = g
                .add_row(z, b)
                .map_err(|e| Error::dim(format!("layer {i}: {e}")))?;
            if !(skip_softmax && i == last && layer.activation == Activation::Softmax) {
                h = layer.activation.apply(g, h);
            }
        }
        Ok(h)
    }

    /// Plain evaluation without tracking gradients.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}
