pub mod ablation;
pub mod config;
pub mod decoder;
pub mod diffgraph;
pub mod encoder;
pub mod error;
pub mod model;
pub mod objective;
pub mod tokenizer;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
