//! The gate over experts: mixture objective, task assignment, Dirichlet
//! dropout and test-time selection.

mod bound;
mod gate;
mod state;

pub use bound::{theorem_bound_check, BoundReport};
pub use gate::{
    argmax, assignment_log_complements, assignment_probabilities, batch_assignment_log_complements,
    batch_assignment_probabilities, choose_expert, dirichlet_parameters, inference_probabilities,
    pick, sample_mixing_weights, InferenceMode, DEFAULT_FLOOR, DEFAULT_PENALTY, ELBO_EPSILON,
};
pub use state::{score_samples, weighted_objective, MixtureState, SelectionReport, WEIGHT_CUTOFF};
