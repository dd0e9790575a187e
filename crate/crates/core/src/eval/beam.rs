use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::model::{Decoder, KvCache, ModelState};
use crate::patch::PromptLayout;
use crate::tensor::log_softmax_row;
use crate::tokenizer::{TokenId, TokenizedCatalog, EOS};
use crate::trie::TitleTrie;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub width: usize,
    /// Rank by mean per-token log-probability instead of the plain sum.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 20,
            length_normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    /// Generated tokens; ends with `EOS` once finished.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Beam {
    pub fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Distinct items with non-increasing scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankedList {
    pub items: Vec<(ItemId, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|(i, _)| *i).collect()
    }
}

struct Live {
    beam: Beam,
    cache: KvCache,
    logits: Vec<f64>,
}

fn by_score(a: &Beam, b: &Beam, normalize: bool) -> Ordering {
    b.score(normalize)
        .total_cmp(&a.score(normalize))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Constrained beam search with the catalog's trie; warns and clamps when
/// the width exceeds the number of distinct titles.
pub fn beam_search(
    state: &ModelState,
    catalog: &TokenizedCatalog,
    layout: &PromptLayout,
    cfg: &BeamConfig,
) -> Result<RankedList> {
    if state.config.vocab_size != catalog.vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "model has {} tokens, catalog vocabulary {}",
            state.config.vocab_size,
            catalog.vocab.len()
        )));
    }
    let titles = catalog.trie.num_titles();
    let mut cfg = *cfg;
    if cfg.width > titles {
        log::warn!("beam width {} exceeds {titles} distinct titles; clamped", cfg.width);
        cfg.width = titles;
    }
    beam_search_with(&Decoder::new(state), &catalog.trie, layout, &cfg)
}

pub fn beam_search_with(
    decoder: &Decoder,
    trie: &TitleTrie,
    layout: &PromptLayout,
    cfg: &BeamConfig,
) -> Result<RankedList> {
    let width = cfg.width.min(trie.num_titles());
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let norm = cfg.length_normalize;
    let layers = decoder.state().config.n_layers;
    let (prefix, logits) = decoder.prefill(layout)?;
    let mut live = vec![Live {
        beam: Beam {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        cache: KvCache::new(layers),
        logits,
    }];
    let mut finished: Vec<Beam> = Vec::new();
    let mut lsm = Vec::new();
    while !live.is_empty() {
        // (parent, candidate)
        let mut pool: Vec<(Option<usize>, Beam)> =
            finished.drain(..).map(|b| (None, b)).collect();
        for (pi, l) in live.iter().enumerate() {
            lsm.resize(l.logits.len(), 0.0);
            log_softmax_row(&l.logits, &mut lsm);
            for t in trie.allowed_next(&l.beam.tokens)? {
                let mut tokens = l.beam.tokens.clone();
                tokens.push(t);
                pool.push((
                    Some(pi),
                    Beam {
                        tokens,
                        log_prob: l.beam.log_prob + lsm[t as usize],
                        finished: t == EOS,
                    },
                ));
            }
        }
        pool.sort_by(|a, b| by_score(&a.1, &b.1, norm));
        pool.truncate(width);
        let mut next = Vec::new();
        for (parent, beam) in pool {
            if beam.finished {
                finished.push(beam);
                continue;
            }
            let parent = &live[parent.expect("open beams have a parent")];
            let mut cache = parent.cache.clone();
            let tok = *beam.tokens.last().expect("non-empty");
            let logits = decoder.extend(&prefix, &mut cache, tok)?;
            next.push(Live { beam, cache, logits });
        }
        live = next;
    }
    finished.sort_by(|a, b| by_score(a, b, norm));
    let mut items = Vec::new();
    for b in &finished {
        let title = &b.tokens[..b.tokens.len() - 1];
        let ids = trie
            .items_for(title)
            .ok_or_else(|| Error::InvalidPrefix(title.to_vec()))?;
        items.extend(ids.iter().map(|&i| (i, b.score(norm))));
    }
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    items.truncate(width);
    Ok(RankedList { items })
}
