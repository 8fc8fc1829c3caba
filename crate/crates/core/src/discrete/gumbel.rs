use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// A relaxed one-hot draw and what produced it.
#[derive(Clone, Debug)]
pub struct GumbelSample {
    pub d: Var,
    pub probabilities: Var,
    pub noise: Tensor,
    pub temperature: f64,
}

/// Standard Gumbel draws `-ln(-ln U)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            // U in (0, 1): both logs stay finite.
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!(
            "temperature must be positive, got {t}"
        )));
    }
    Ok(())
}

/// `softmax((log max(d', floor) + noise) / T)` row-wise, differentiable in `d'`.
pub fn relax(g: &mut Graph, probabilities: Var, noise: &Tensor, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    if g.value(probabilities).shape() != noise.shape() {
        return Err(Error::dim(format!(
            "gumbel noise shape {:?} differs from probabilities {:?}",
            noise.shape(),
            g.value(probabilities).shape()
        )));
    }
    let floored = g.clamp_min(probabilities, PROB_FLOOR);
    let logp = g.log(floored);
    let n = g.constant(noise.clone());
    let perturbed = g.add(logp, n)?;
    let scaled = g.scale(perturbed, 1.0 / temperature);
    Ok(g.softmax(scaled))
}

pub fn gumbel_softmax<R: Rng + ?Sized>(
    g: &mut Graph,
    probabilities: Var,
    temperature: f64,
    rng: &mut R,
) -> Result<GumbelSample> {
    let shape = g.value(probabilities).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(
            "gumbel_softmax expects a [batch, classes] matrix",
        ));
    }
    let noise = sample_gumbel(rng, shape[0], shape[1]);
    let d = relax(g, probabilities, &noise, temperature)?;
    Ok(GumbelSample {
        d,
        probabilities,
        noise,
        temperature,
    })
}

/// Plain-value version of [`relax`] for a single probability vector.
pub fn relax_values(probabilities: &[f64], noise: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if probabilities.len() != noise.len() {
        return Err(Error::dim("probabilities and noise lengths differ"));
    }
    let mut v: Vec<f64> = probabilities
        .iter()
        .zip(noise)
        .map(|(p, n)| (p.max(PROB_FLOOR).ln() + n) / temperature)
        .collect();
    crate::autodiff::softmax_in_place(&mut v);
    Ok(v)
}

/// Temperature annealed linearly over a task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.5,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.start)?;
        check_temperature(self.end)
    }

    pub fn value(&self, progress: f64) -> f64 {
        self.start + (self.end - self.start) * progress.clamp(0.0, 1.0)
    }
}
