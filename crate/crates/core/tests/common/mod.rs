#![allow(dead_code)]

use patchrec_core::data::{generate_synthetic, FilterConfig, SplitDataset, SplitRatio, SyntheticConfig};
use patchrec_core::model::{ModelConfig, CONFIG_VERSION};
use patchrec_core::tokenizer::TokenizedCatalog;

pub fn small_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        users: 40,
        items: 30,
        interactions_per_user: 20,
        genres: 5,
        seed: 11,
        ..Default::default()
    }
}

pub fn dataset(cfg: &SyntheticConfig, ratio: SplitRatio) -> (SplitDataset, TokenizedCatalog) {
    let data = generate_synthetic(cfg).unwrap();
    let ds = SplitDataset::build(data.catalog, data.interactions, &FilterConfig::default(), ratio).unwrap();
    let cat = TokenizedCatalog::new(&ds.catalog).unwrap();
    (ds, cat)
}

/// Small data with a generous test split so evaluation has cases.
pub fn small() -> (SplitDataset, TokenizedCatalog) {
    dataset(&small_synthetic(), SplitRatio { train: 8, validation: 1, test: 1 })
}

pub fn tiny_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        version: CONFIG_VERSION,
        d: 8,
        n_layers: 1,
        n_heads: 2,
        max_positions: 64,
        vocab_size: vocab,
        mlp_hidden: 16,
    }
}
