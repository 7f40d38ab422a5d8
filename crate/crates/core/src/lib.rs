pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod synth;
pub mod tagging;
pub mod tokenizer;

pub use error::{Error, Result};
