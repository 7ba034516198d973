pub mod autograd;
pub mod config;
pub mod corpus_io;
pub mod distill;
pub mod downstream;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
