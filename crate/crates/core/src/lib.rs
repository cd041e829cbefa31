pub mod adversarial;
pub mod analysis;
pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod tokenizer;

pub use error::{Error, Result};
