use super::{beam_search_with, hit_ratio, ndcg, rank_of, BeamConfig, RankedList};
use crate::data::{ItemId, Split, SplitDataset, UserId};
use crate::error::{Error, Result};
use crate::model::{Decoder, ModelState};
use crate::patch::{build_layout, LayoutConfig};
use crate::tokenizer::TokenizedCatalog;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub layout: LayoutConfig,
    #[serde(default)]
    pub beam: BeamConfig,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Evenly strided subsample of at most this many cases.
    #[serde(default)]
    pub max_cases: Option<usize>,
    /// Only cases whose user has at least this many earlier interactions.
    #[serde(default)]
    pub min_history: usize,
    /// Extra breakdowns over cases with at least this much history.
    #[serde(default)]
    pub cohorts: Vec<usize>,
}

fn default_split() -> Split {
    Split::Test
}

impl EvalConfig {
    pub fn new(layout: LayoutConfig) -> Self {
        Self {
            layout,
            beam: BeamConfig::default(),
            split: Split::Test,
            max_cases: None,
            min_history: 0,
            cohorts: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub user_id: UserId,
    pub item_id: ItemId,
    /// Interactions before the target in the full sequence.
    pub prior: usize,
    pub rank: Option<usize>,
    pub history_tokens: usize,
    pub history_positions: usize,
    pub prompt_positions: usize,
}

impl CaseResult {
    pub fn cr(&self) -> f64 {
        self.history_tokens as f64 / self.history_positions as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub min_history: usize,
    pub cases: usize,
    pub hr_10: f64,
    pub ndcg_10: f64,
    pub hr_20: f64,
    pub ndcg_20: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: usize,
    pub hr_10: f64,
    pub ndcg_10: f64,
    pub hr_20: f64,
    pub ndcg_20: f64,
    /// Sum of history tokens over sum of history positions.
    pub cr: f64,
    pub cr_mean_of_ratios: f64,
    pub history_tokens: usize,
    pub history_positions: usize,
    pub prompt_positions: usize,
    /// Expected HR@20 of a uniformly random ranking cut at the beam width.
    pub random_hr_20: f64,
    pub config: EvalConfig,
    pub cohorts: Vec<CohortReport>,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Chance of the truth landing in the top 20 of a random ranking truncated to `width`.
pub fn random_hit_rate(items: usize, width: usize) -> f64 {
    20.min(width).min(items) as f64 / items as f64
}

fn select_cases(dataset: &SplitDataset, cfg: &EvalConfig) -> Vec<crate::data::Case> {
    let all: Vec<_> = dataset
        .cases(cfg.split)
        .into_iter()
        .filter(|c| dataset.prior_count(c.user_id, c.timestamp) >= cfg.min_history.max(1))
        .collect();
    match cfg.max_cases {
        Some(cap) if cap < all.len() => (0..cap).map(|i| all[i * all.len() / cap]).collect(),
        _ => all,
    }
}

fn metrics(lists: &[RankedList], truths: &[ItemId]) -> Result<[f64; 4]> {
    Ok([
        hit_ratio(lists, truths, 10)?,
        ndcg(lists, truths, 10)?,
        hit_ratio(lists, truths, 20)?,
        ndcg(lists, truths, 20)?,
    ])
}

/// Decodes every selected case and aggregates ranking and compression metrics.
pub fn evaluate(
    state: &ModelState,
    catalog: &TokenizedCatalog,
    dataset: &SplitDataset,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<CaseResult>)> {
    cfg.layout.validate()?;
    if state.config.vocab_size != catalog.vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "model has {} tokens, catalog vocabulary {}",
            state.config.vocab_size,
            catalog.vocab.len()
        )));
    }
    let mut beam = cfg.beam;
    let titles = catalog.trie.num_titles();
    if beam.width > titles {
        log::warn!("beam width {} exceeds {titles} distinct titles; clamped", beam.width);
        beam.width = titles;
    }
    let cases = select_cases(dataset, cfg);
    if cases.is_empty() {
        return Err(Error::TooSmall(format!("no {:?} cases to evaluate", cfg.split)));
    }
    let decoder = Decoder::new(state);
    let mut lists = Vec::with_capacity(cases.len());
    let mut results = Vec::with_capacity(cases.len());
    for c in &cases {
        let history = dataset.truncate_history(c.user_id, c.timestamp, cfg.layout.k)?;
        let layout = build_layout(catalog, &history, None, &cfg.layout)?;
        let list = beam_search_with(&decoder, &catalog.trie, &layout, &beam)?;
        results.push(CaseResult {
            user_id: c.user_id,
            item_id: c.item_id,
            prior: dataset.prior_count(c.user_id, c.timestamp),
            rank: rank_of(&list, c.item_id),
            history_tokens: layout.history_title_tokens(),
            history_positions: layout.history_positions(),
            prompt_positions: layout.positions(),
        });
        lists.push(list);
    }
    let truths: Vec<ItemId> = cases.iter().map(|c| c.item_id).collect();
    let [hr_10, ndcg_10, hr_20, ndcg_20] = metrics(&lists, &truths)?;
    let mut cohorts = Vec::new();
    for &min in &cfg.cohorts {
        let idx: Vec<usize> = (0..results.len()).filter(|&i| results[i].prior >= min).collect();
        if idx.is_empty() {
            log::warn!("cohort with at least {min} prior interactions is empty");
            continue;
        }
        let l: Vec<RankedList> = idx.iter().map(|&i| lists[i].clone()).collect();
        let t: Vec<ItemId> = idx.iter().map(|&i| truths[i]).collect();
        let [hr_10, ndcg_10, hr_20, ndcg_20] = metrics(&l, &t)?;
        cohorts.push(CohortReport {
            min_history: min,
            cases: idx.len(),
            hr_10,
            ndcg_10,
            hr_20,
            ndcg_20,
        });
    }
    let history_tokens: usize = results.iter().map(|r| r.history_tokens).sum();
    let history_positions: usize = results.iter().map(|r| r.history_positions).sum();
    let report = EvalReport {
        cases: results.len(),
        hr_10,
        ndcg_10,
        hr_20,
        ndcg_20,
        cr: history_tokens as f64 / history_positions as f64,
        cr_mean_of_ratios: results.iter().map(CaseResult::cr).sum::<f64>() / results.len() as f64,
        history_tokens,
        history_positions,
        prompt_positions: results.iter().map(|r| r.prompt_positions).sum(),
        random_hr_20: random_hit_rate(catalog.titles().len(), beam.width),
        config: EvalConfig { beam, ..cfg.clone() },
        cohorts,
    };
    Ok((report, results))
}

/// Columns: `user_id,item_id,prior,rank,history_tokens,history_positions,prompt_positions,cr`.
/// `rank` is empty when the truth was not retrieved.
pub fn write_case_csv(path: &Path, results: &[CaseResult]) -> Result<()> {
    let mut out = String::from(
        "user_id,item_id,prior,rank,history_tokens,history_positions,prompt_positions,cr\n",
    );
    for r in results {
        let rank = r.rank.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{rank},{},{},{},{:.6}",
            r.user_id,
            r.item_id,
            r.prior,
            r.history_tokens,
            r.history_positions,
            r.prompt_positions,
            r.cr()
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}
