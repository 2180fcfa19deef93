//! Shared fixtures for the criterion benchmarks.

use dsae_core::model::{DecoderMode, InferenceMode};
use dsae_core::synthdata::{generate_dataset, Dataset, FactorSpec};
use dsae_core::ModelConfig;

/// Training split of a small default corpus.
pub fn corpus(n: usize) -> Dataset {
    generate_dataset(&FactorSpec::default(), n, 7)
        .expect("default spec is valid")
        .train
}

pub fn model_config(enriched: bool) -> ModelConfig {
    let mut config = ModelConfig::default();
    if enriched {
        config.inference_mode = InferenceMode::Full;
        config.decoder_mode = DecoderMode::Enriched;
    }
    config
}
