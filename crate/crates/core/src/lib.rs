pub mod autodiff;
pub mod beam;
pub mod bench;
pub mod bleu;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod layers;
pub mod presets;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
