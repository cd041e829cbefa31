#![allow(dead_code)]

use std::path::PathBuf;

use mivuln_core::model::{ModelConfig, ModelParams};
use mivuln_core::tokenizer::Tokenizer;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn tokenizer() -> Tokenizer {
    let dir = workspace_root().join("assets/gpt2");
    Tokenizer::from_files(dir.join("vocab.json"), dir.join("merges.txt")).expect("shipped tokenizer files")
}

pub fn nouns_path() -> PathBuf {
    workspace_root().join("assets/nouns.txt")
}

/// The 2-layer, 2-head, d=16 GPT-2 exported by `make_fixtures.py`.
pub fn tiny_model() -> ModelParams<f32> {
    let cfg = ModelConfig::from_json_file(fixture("tiny_gpt2_config.json")).unwrap();
    ModelParams::load_with_config(fixture("tiny_gpt2.safetensors"), cfg).unwrap()
}

/// GPT-2 Small weights, from `MIVULN_GPT2_WEIGHTS` or
/// `assets/gpt2/model.safetensors`.
pub fn gpt2_small_path() -> Option<PathBuf> {
    std::env::var_os("MIVULN_GPT2_WEIGHTS")
        .map(PathBuf::from)
        .or_else(|| Some(workspace_root().join("assets/gpt2/model.safetensors")))
        .filter(|p| p.is_file())
}

pub fn gpt2_small() -> Option<ModelParams<f32>> {
    gpt2_small_path().map(|p| ModelParams::load(p).expect("GPT-2 Small weights load"))
}
