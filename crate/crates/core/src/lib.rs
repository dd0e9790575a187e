pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod patch;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod trie;

pub use error::{Error, Result};
