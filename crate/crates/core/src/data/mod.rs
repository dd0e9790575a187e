//! Item catalog and interaction logs.

mod io;
mod split;
mod synthetic;

pub use io::{read_catalog, read_interactions, write_catalog, write_interactions};
pub use split::{ingest, Case, FilterConfig, Split, SplitDataset, SplitRatio, TimedItem};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type ItemId = u64;
pub type UserId = u64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub title: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: i64,
    pub timestamp: i64,
}

/// Items in file order with id lookup.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    items: Vec<Item>,
    index: BTreeMap<ItemId, usize>,
}

impl Catalog {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (pos, item) in items.iter().enumerate() {
            if item.title.trim().is_empty() {
                return Err(Error::EmptyTitle(item.item_id));
            }
            if index.insert(item.item_id, pos).is_some() {
                return Err(Error::Config(format!("duplicate item id {}", item.item_id)));
            }
        }
        Ok(Self { items, index })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ItemId) -> Option<&Item> {
        self.index.get(&id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.index.contains_key(&id)
    }

    /// Keeps only the items whose id satisfies `keep`, preserving order.
    pub fn retain(&self, keep: impl Fn(ItemId) -> bool) -> Result<Self> {
        Self::new(
            self.items
                .iter()
                .filter(|i| keep(i.item_id))
                .cloned()
                .collect(),
        )
    }
}
