#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;
use std::sync::Arc;

use b2t2::data::Example;
use b2t2::encoder::EncoderConfig;
use b2t2::model::{ModelConfig, Variant};
use b2t2::synthetic::{self, SyntheticSpec};
use b2t2::vision::VisionConfig;
use b2t2::vocab::Vocab;

/// A model small enough for finite differences and quick training.
pub fn tiny_config(variant: Variant, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden: 8,
            ffn_dim: 12,
            vocab_size,
            type_vocab: 2,
            max_positions: 32,
            dropout_rate: 0.0,
        },
        vision: VisionConfig {
            out_dim: 8,
            ..VisionConfig::default()
        },
        variant,
        ..ModelConfig::default()
    }
}

pub fn spec(seed: u64, num_train: usize, num_val: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        num_train,
        num_val,
        ..SyntheticSpec::default()
    }
}

pub fn examples(records: &[b2t2::data::Record]) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example {
            record: r.clone(),
            image: Arc::new(r.image.load(Path::new(".")).unwrap()),
        })
        .collect()
}

/// Train and validation examples with their vocabulary.
pub fn synthetic_split(seed: u64, num_train: usize, num_val: usize) -> (Vec<Example>, Vec<Example>, Vocab) {
    let data = synthetic::generate(&spec(seed, num_train, num_val)).unwrap();
    (examples(&data.train), examples(&data.val), data.vocab)
}
