//! Fixtures shared by the benchmarks.

use lmvae_core::autodiff::{Activation, ParamStore};
use lmvae_core::vae::{ExpertArch, VaeExpert};
use lmvae_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[0,1)` matrix.
pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random()).collect())
        .expect("shape matches data")
}

/// An MNIST-sized expert: 784 inputs, one hidden layer of `hidden`.
pub fn mnist_expert(
    store: &mut ParamStore,
    index: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> VaeExpert {
    let arch = ExpertArch {
        input_dim: 784,
        latent_dim: 16,
        hidden: vec![hidden],
        classes: None,
        output: Activation::Logistic,
    };
    VaeExpert::new(store, index, &arch, rng).expect("valid architecture")
}
