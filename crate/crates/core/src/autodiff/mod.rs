//! Reverse-mode differentiation, dense layers and SGD.

pub mod graph;
pub mod nn;
pub mod optim;
pub mod param;

pub use graph::{log_sum_exp, logistic, softmax_in_place, Graph, Var};
pub use nn::{Activation, Dense, Mlp};
pub use optim::Sgd;
pub use param::{ParamId, ParamStore, Parameter};
