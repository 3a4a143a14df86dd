//! Mixture of binomial experts with softmax gating, for panels of bounded
//! count outcomes with covariates and missing outcome cells.

pub mod cli;
pub mod clustering;
pub mod data;
pub mod em;
pub mod error;
pub mod gating;
pub mod imputation;
pub mod inference;
pub mod io;
pub mod mcem;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod selection;
pub mod simulation;

pub use data::{Dataset, MissingPattern, OutcomeSpec};
pub use error::{Error, Result};
pub use model::ModelParams;
pub use rng::StreamSeed;
