pub mod adapt;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod variations;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;
