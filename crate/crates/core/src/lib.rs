pub mod augment;
pub mod autodiff;
pub mod coref;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
