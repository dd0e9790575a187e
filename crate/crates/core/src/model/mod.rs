//! Tiny pre-norm decoder-only transformer with tied input/output embeddings
//! and learned absolute positions.

mod forward;
mod infer;

pub use forward::{
    bind, embed_layout, embed_traced, forward, forward_from_embeddings, layout_loss, loss,
    EmbedTrace, PatchTrace,
};
pub use infer::{Decoder, KvCache};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "model.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub version: u32,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "model config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.max_positions == 0 || self.vocab_size == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("max_positions, vocab_size and mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

pub const TOK_EMB: usize = 0;
pub const POS_EMB: usize = 1;
const PER_LAYER: usize = 12;

/// Offsets of one block's tensors inside [`ModelState::params`].
#[derive(Clone, Copy, Debug)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

pub fn layer_idx(layer: usize) -> LayerIdx {
    let b = 2 + PER_LAYER * layer;
    LayerIdx {
        ln1_g: b,
        ln1_b: b + 1,
        qkv_w: b + 2,
        qkv_b: b + 3,
        out_w: b + 4,
        out_b: b + 5,
        ln2_g: b + 6,
        ln2_b: b + 7,
        fc_w: b + 8,
        fc_b: b + 9,
        proj_w: b + 10,
        proj_b: b + 11,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.d, config.mlp_hidden);
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        let mut params = vec![
            Tensor::uniform(&[config.vocab_size, d], 0.1, &mut rng),
            Tensor::uniform(&[config.max_positions, d], 0.02, &mut rng),
        ];
        let w = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let resid = (2.0 * config.n_layers.max(1) as f64).sqrt();
        for l in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).expect("shape");
            names.extend(
                [
                    "ln1.gain", "ln1.bias", "attn.qkv.w", "attn.qkv.b", "attn.out.w", "attn.out.b",
                    "ln2.gain", "ln2.bias", "mlp.fc.w", "mlp.fc.b", "mlp.proj.w", "mlp.proj.b",
                ]
                .map(p),
            );
            params.push(ones(d));
            params.push(Tensor::zeros(&[d]));
            params.push(Tensor::uniform(&[d, 3 * d], w(d), &mut rng));
            params.push(Tensor::zeros(&[3 * d]));
            params.push(Tensor::uniform(&[d, d], w(d) / resid, &mut rng));
            params.push(Tensor::zeros(&[d]));
            params.push(ones(d));
            params.push(Tensor::zeros(&[d]));
            params.push(Tensor::uniform(&[d, h], w(d), &mut rng));
            params.push(Tensor::zeros(&[h]));
            params.push(Tensor::uniform(&[h, d], w(h) / resid, &mut rng));
            params.push(Tensor::zeros(&[d]));
        }
        let params = params.into_iter().map(Tensor::trainable).collect();
        Ok(Self { config, names, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, p) in self.names.iter().zip(&self.params) {
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt(format!("non-finite values in `{n}`")));
            }
        }
        Ok(())
    }

    /// Bitwise parameter equality.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.config == other.config
            && self.names == other.names
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let refs: Vec<(&str, &Tensor)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(&self.params)
            .collect();
        checkpoint::save_tensors(dir, &refs)?;
        fs::write(dir.join(CONFIG_FILE), toml::to_string(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = toml::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        config.validate()?;
        let template = Self::init(config.clone(), 0)?;
        let loaded = checkpoint::load_tensors(dir)?;
        if loaded.len() != template.params.len() {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                loaded.len()
            )));
        }
        let mut params = Vec::with_capacity(loaded.len());
        for ((name, t), (want, shape)) in loaded
            .into_iter()
            .zip(template.names.iter().zip(template.params.iter().map(|p| &p.shape)))
        {
            if &name != want || &t.shape != shape {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` {:?} where `{want}` {shape:?} was expected",
                    t.shape
                )));
            }
            params.push(t.trainable());
        }
        Ok(Self {
            config,
            names: template.names,
            params,
        })
    }
}
