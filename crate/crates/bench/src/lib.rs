//! Shared fixtures for the criterion benches.

use gfnet_core::dataio::synth::{self, SynthCorpus, SynthSpec};
use gfnet_core::model::{GfModel, ModelConfig};

pub fn desk_model(seed: u64) -> GfModel {
    GfModel::init(ModelConfig::desk_default(), seed).expect("desk config is valid")
}

pub fn small_corpus(seed: u64) -> SynthCorpus {
    synth::generate(SynthSpec {
        n_train: 64,
        n_val: 32,
        n_test: 32,
        seed,
    })
    .expect("synth corpus")
}
