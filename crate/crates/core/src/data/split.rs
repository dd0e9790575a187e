use super::{read_catalog, read_interactions, Catalog, Interaction, ItemId, UserId};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Interactions rated below this are dropped.
    pub min_rating: i64,
    /// Users need at least this many interactions.
    pub min_user_interactions: usize,
    /// Items need at least this many distinct users.
    pub min_item_users: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_rating: i64::MIN,
            min_user_interactions: 1,
            min_item_users: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u64,
    pub validation: u64,
    pub test: u64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 48,
            validation: 1,
            test: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimedItem {
    pub item_id: ItemId,
    pub timestamp: i64,
    pub split: Split,
}

/// One next-item prediction case: the target interaction and where it sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Case {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub timestamp: i64,
    /// Index of the target in the user's chronological sequence.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub catalog: Catalog,
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    users: BTreeMap<UserId, Vec<TimedItem>>,
}

pub fn ingest(catalog_path: &Path, interactions_path: &Path, filter: &FilterConfig) -> Result<SplitDataset> {
    let catalog = read_catalog(catalog_path)?;
    let interactions = read_interactions(interactions_path)?;
    SplitDataset::build(catalog, interactions, filter, SplitRatio::default())
}

fn user_counts(xs: &[Interaction]) -> BTreeMap<UserId, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x.user_id).or_insert(0) += 1;
    }
    m
}

fn keep_active_users(xs: Vec<Interaction>, min: usize) -> Vec<Interaction> {
    let counts = user_counts(&xs);
    xs.into_iter().filter(|x| counts[&x.user_id] >= min).collect()
}

impl SplitDataset {
    /// Filters, then splits on global timestamp quantiles. Input order is the
    /// tie-breaker for equal timestamps.
    pub fn build(
        catalog: Catalog,
        interactions: Vec<Interaction>,
        filter: &FilterConfig,
        ratio: SplitRatio,
    ) -> Result<Self> {
        let unknown: BTreeSet<ItemId> = interactions
            .iter()
            .filter(|x| !catalog.contains(x.item_id))
            .map(|x| x.item_id)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownItems(unknown.into_iter().collect()));
        }
        let total_ratio = ratio.train + ratio.validation + ratio.test;
        if total_ratio == 0 {
            return Err(Error::Config("split ratio sums to zero".into()));
        }

        let rated: Vec<Interaction> = interactions
            .into_iter()
            .filter(|x| x.rating >= filter.min_rating)
            .collect();
        let users_ok = keep_active_users(rated, filter.min_user_interactions);
        let mut item_users: BTreeMap<ItemId, BTreeSet<UserId>> = BTreeMap::new();
        for x in &users_ok {
            item_users.entry(x.item_id).or_default().insert(x.user_id);
        }
        let items_ok: Vec<Interaction> = users_ok
            .into_iter()
            .filter(|x| item_users[&x.item_id].len() >= filter.min_item_users)
            .collect();
        // One re-check of the user threshold after item removal; no fixed point.
        let kept = keep_active_users(items_ok, filter.min_user_interactions);
        if kept.is_empty() {
            return Err(Error::EmptyDataset);
        }

        let live: BTreeSet<ItemId> = kept.iter().map(|x| x.item_id).collect();
        let catalog = catalog.retain(|id| live.contains(&id))?;

        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by_key(|&i| (kept[i].timestamp, i));
        let n = kept.len() as u64;
        let train_end = (n * ratio.train / total_ratio) as usize;
        let val_end = (n * (ratio.train + ratio.validation) / total_ratio) as usize;
        let mut split_of = vec![Split::Train; kept.len()];
        let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (rank, &i) in order.iter().enumerate() {
            let s = if rank < train_end {
                train.push(kept[i]);
                Split::Train
            } else if rank < val_end {
                validation.push(kept[i]);
                Split::Validation
            } else {
                test.push(kept[i]);
                Split::Test
            };
            split_of[i] = s;
        }

        let mut users: BTreeMap<UserId, Vec<(i64, usize, TimedItem)>> = BTreeMap::new();
        for (i, x) in kept.iter().enumerate() {
            users.entry(x.user_id).or_default().push((
                x.timestamp,
                i,
                TimedItem {
                    item_id: x.item_id,
                    timestamp: x.timestamp,
                    split: split_of[i],
                },
            ));
        }
        let users = users
            .into_iter()
            .map(|(u, mut v)| {
                v.sort_by_key(|&(ts, i, _)| (ts, i));
                (u, v.into_iter().map(|(_, _, t)| t).collect())
            })
            .collect();

        Ok(Self {
            catalog,
            train,
            validation,
            test,
            users,
        })
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.users.keys().copied()
    }

    pub fn user_sequence(&self, user: UserId) -> &[TimedItem] {
        self.users.get(&user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// Number of the user's interactions strictly before `anchor`.
    pub fn prior_count(&self, user: UserId, anchor: i64) -> usize {
        self.user_sequence(user).partition_point(|t| t.timestamp < anchor)
    }

    /// The at-most-`k` most recent items strictly before `anchor`, oldest first.
    pub fn truncate_history(&self, user: UserId, anchor: i64, k: usize) -> Result<Vec<ItemId>> {
        if k == 0 {
            return Err(Error::InvalidArgument("truncation length must be at least 1".into()));
        }
        let seq = self.user_sequence(user);
        let end = seq.partition_point(|t| t.timestamp < anchor);
        if end == 0 {
            return Err(Error::EmptyHistory(user));
        }
        Ok(seq[end.saturating_sub(k)..end]
            .iter()
            .map(|t| t.item_id)
            .collect())
    }

    /// Cases whose target falls in `split` and that have at least one prior
    /// interaction, ordered by user then time.
    pub fn cases(&self, split: Split) -> Vec<Case> {
        self.cases_capped(split, usize::MAX)
    }

    /// Like [`cases`](Self::cases) but keeps only each user's latest `cap` targets.
    pub fn cases_capped(&self, split: Split, cap: usize) -> Vec<Case> {
        let mut out = Vec::new();
        for (&user, seq) in &self.users {
            let mut mine: Vec<Case> = seq
                .iter()
                .enumerate()
                .filter(|(_, t)| t.split == split)
                .filter(|(_, t)| self.prior_count(user, t.timestamp) > 0)
                .map(|(position, t)| Case {
                    user_id: user,
                    item_id: t.item_id,
                    timestamp: t.timestamp,
                    position,
                })
                .collect();
            let skip = mine.len().saturating_sub(cap);
            out.extend(mine.drain(skip..));
        }
        out
    }
}
