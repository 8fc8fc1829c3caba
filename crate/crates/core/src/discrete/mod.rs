//! Discrete class latent: class encoders, Gumbel-softmax relaxation and the
//! supervised and semi-supervised mixture objectives.

mod encoder;
mod gumbel;
mod objective;

pub use encoder::{classify, ClassEncoder, Classification};
pub use gumbel::{
    gumbel_softmax, relax, relax_values, sample_gumbel, GumbelSample, TemperatureSchedule,
    PROB_FLOOR,
};
pub use objective::{
    categorical_kl_uniform_per_sample, conditional_elbo, cross_entropy, mixture_supervised_loss,
    semi_supervised_loss, supervised_elbo, unlabeled_elbo, DecoderCode, SemiSupervisedBatch,
    SupervisedLosses,
};
