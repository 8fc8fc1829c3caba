//! Gaussian-latent VAE experts.

mod expert;
mod schedule;

pub use expert::{
    gaussian_kl, gaussian_kl_per_sample, gaussian_log_likelihood, reparameterize, ElboNodes,
    ElboTerms, ExpertArch, VaeExpert, HALF_LN_2PI,
};
pub use schedule::{BetaSchedule, DisentangleSchedule};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// A `[rows, cols]` matrix of standard-normal draws.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}
