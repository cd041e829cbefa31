//! Shared inputs for the criterion benches.

use std::path::PathBuf;

use mivuln_core::dataset::CandidateVocab;
use mivuln_core::model::{ModelConfig, ModelParams};
use mivuln_core::tokenizer::Tokenizer;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn tokenizer() -> Tokenizer {
    let dir = workspace_root().join("assets/gpt2");
    Tokenizer::from_files(dir.join("vocab.json"), dir.join("merges.txt")).expect("tokenizer assets")
}

pub fn vocab(tokenizer: &Tokenizer) -> CandidateVocab {
    CandidateVocab::build(workspace_root().join("assets/nouns.txt"), tokenizer).expect("noun list")
}

/// Random weights at GPT-2 Small width with `n_layers` blocks.
pub fn gpt2_width_model(n_layers: usize) -> ModelParams<f32> {
    let config = ModelConfig {
        n_layers,
        ..ModelConfig::gpt2_small()
    };
    ModelParams::random(config, 0, 0.02)
}
