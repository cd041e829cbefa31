//! GPT-2 runtime: weights, cached/patchable forward pass and the reverse
//! pass to input embeddings.

mod backward;
mod config;
mod forward;
mod ops;
mod params;
mod scalar;

pub use backward::{EmbeddingGrad, LinearLogitLoss, LogitLoss};
pub use config::ModelConfig;
pub use forward::{ActivationCache, LayerActivations, PatchSpec, PatchTarget, Positions, Readout};
pub use params::{to_safetensors_bytes, LayerParams, ModelParams};
pub use scalar::Real;
