use super::RankedList;
use crate::data::ItemId;
use crate::error::{Error, Result};

/// 1-based rank of `truth`, if present.
pub fn rank_of(list: &RankedList, truth: ItemId) -> Option<usize> {
    list.items.iter().position(|(i, _)| *i == truth).map(|r| r + 1)
}

fn check(lists: &[RankedList], truths: &[ItemId], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff K must be at least 1".into()));
    }
    if lists.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ranked lists for {} ground truths",
            lists.len(),
            truths.len()
        )));
    }
    if lists.is_empty() {
        return Err(Error::InvalidArgument("no cases to score".into()));
    }
    Ok(())
}

/// Fraction of cases whose truth is within the top `k`.
pub fn hit_ratio(lists: &[RankedList], truths: &[ItemId], k: usize) -> Result<f64> {
    check(lists, truths, k)?;
    let hits = lists
        .iter()
        .zip(truths)
        .filter(|(l, &t)| rank_of(l, t).is_some_and(|r| r <= k))
        .count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over cases hit within the top `k`.
pub fn ndcg(lists: &[RankedList], truths: &[ItemId], k: usize) -> Result<f64> {
    check(lists, truths, k)?;
    let gain: f64 = lists
        .iter()
        .zip(truths)
        .filter_map(|(l, &t)| rank_of(l, t).filter(|&r| r <= k))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(gain / lists.len() as f64)
}
