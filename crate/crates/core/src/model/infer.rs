//! Tape-free incremental decoding with a key/value cache.
//!
//! Beams share the prompt's cache as an immutable prefix and keep only their
//! own generated rows in a small suffix cache.

use super::{forward::embed_layout, layer_idx, ModelState, POS_EMB, TOK_EMB};
use crate::error::{Error, Result};
use crate::patch::PromptLayout;
use crate::tensor::{self, gelu, layer_norm_row};
use crate::tokenizer::TokenId;

/// Keys and values per layer, `[len × d]` each.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct Decoder<'a> {
    state: &'a ModelState,
    empty: KvCache,
}

impl<'a> Decoder<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        Self {
            state,
            empty: KvCache::new(state.config.n_layers),
        }
    }

    pub fn state(&self) -> &ModelState {
        self.state
    }

    /// Runs one input row (positional vector already added) through every
    /// block, appending its keys and values to `suffix`. Returns the final
    /// hidden state.
    pub fn step_row(&self, prefix: &KvCache, suffix: &mut KvCache, x: &[f64]) -> Vec<f64> {
        let cfg = &self.state.config;
        let p = &self.state.params;
        let d = cfg.d;
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x.to_vec();
        let mut a = vec![0.0; d];
        for l in 0..cfg.n_layers {
            let ix = layer_idx(l);
            layer_norm_row(&h, &p[ix.ln1_g].data, &p[ix.ln1_b].data, &mut a);
            let mut qkv = p[ix.qkv_b].data.clone();
            tensor::matmul_acc(&a, &p[ix.qkv_w].data, &mut qkv, 1, d, 3 * d);
            suffix.keys[l].extend_from_slice(&qkv[d..2 * d]);
            suffix.values[l].extend_from_slice(&qkv[2 * d..]);
            let (pk, pv) = (&prefix.keys[l], &prefix.values[l]);
            let (sk, sv) = (&suffix.keys[l], &suffix.values[l]);
            let total = prefix.len + suffix.len + 1;
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; total];
            for hd in 0..cfg.n_heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                let key = |j: usize| -> &[f64] {
                    let (buf, r) = if j < prefix.len { (pk, j) } else { (sk, j - prefix.len) };
                    &buf[r * d + hd * dh..r * d + (hd + 1) * dh]
                };
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = tensor::dot(q, key(j)) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let out = &mut att[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter().enumerate() {
                    let (buf, r) = if j < prefix.len { (pv, j) } else { (sv, j - prefix.len) };
                    let v = &buf[r * d + hd * dh..r * d + (hd + 1) * dh];
                    let w = s / z;
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += w * vv;
                    }
                }
            }
            let mut o = p[ix.out_b].data.clone();
            tensor::matmul_acc(&att, &p[ix.out_w].data, &mut o, 1, d, d);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            layer_norm_row(&h, &p[ix.ln2_g].data, &p[ix.ln2_b].data, &mut a);
            let hid = cfg.mlp_hidden;
            let mut f = p[ix.fc_b].data.clone();
            tensor::matmul_acc(&a, &p[ix.fc_w].data, &mut f, 1, d, hid);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let mut f2 = p[ix.proj_b].data.clone();
            tensor::matmul_acc(&f, &p[ix.proj_w].data, &mut f2, 1, hid, d);
            h.iter_mut().zip(&f2).for_each(|(x, y)| *x += y);
        }
        suffix.len += 1;
        h
    }

    /// Tied-head logits for one hidden state.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let cfg = &self.state.config;
        let mut out = vec![0.0; cfg.vocab_size];
        tensor::matmul_nt_acc(hidden, &self.state.params[TOK_EMB].data, &mut out, 1, cfg.d, cfg.vocab_size);
        out
    }

    /// Encodes rows one at a time; returns the cache and logits at every row.
    pub fn prefill_rows(&self, rows: &[f64]) -> (KvCache, Vec<Vec<f64>>) {
        let d = self.state.config.d;
        let mut cache = KvCache::new(self.state.config.n_layers);
        let logits = rows
            .chunks(d)
            .map(|x| {
                let h = self.step_row(&self.empty, &mut cache, x);
                self.logits(&h)
            })
            .collect();
        (cache, logits)
    }

    /// Encodes the prompt of `layout`; returns its cache and the logits at the
    /// last prompt position.
    pub fn prefill(&self, layout: &PromptLayout) -> Result<(KvCache, Vec<f64>)> {
        let x = embed_layout(self.state, layout)?;
        let (cache, mut logits) = self.prefill_rows(&x.data);
        let last = logits.pop().ok_or(Error::EmptyTarget)?;
        if last.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prefill"));
        }
        Ok((cache, last))
    }

    /// Feeds `token` after `prefix` + `suffix`; returns the next-token logits.
    pub fn extend(&self, prefix: &KvCache, suffix: &mut KvCache, token: TokenId) -> Result<Vec<f64>> {
        let cfg = &self.state.config;
        let pos = prefix.len + suffix.len;
        if pos >= cfg.max_positions {
            return Err(Error::LayoutTooLong {
                positions: pos + 1,
                max: cfg.max_positions,
            });
        }
        let tok = self.state.params[TOK_EMB].row(token as usize);
        let pe = self.state.params[POS_EMB].row(pos);
        let x: Vec<f64> = tok.iter().zip(pe).map(|(a, b)| a + b).collect();
        let h = self.step_row(prefix, suffix, &x);
        Ok(self.logits(&h))
    }
}
