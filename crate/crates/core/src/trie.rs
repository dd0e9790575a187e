//! Token-level prefix tree over catalog titles.

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::tokenizer::{is_special, TokenId, EOS};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    /// Items whose title ends here; non-empty iff the node is terminal.
    items: Vec<ItemId>,
}

#[derive(Clone, Debug)]
pub struct TitleTrie {
    nodes: Vec<Node>,
}

impl TitleTrie {
    /// Items sharing a title end on the same terminal node.
    pub fn build(titles: &BTreeMap<ItemId, Vec<TokenId>>) -> Result<Self> {
        let mut nodes = vec![Node::default()];
        for (&item, toks) in titles {
            if toks.is_empty() {
                return Err(Error::EmptyTitle(item));
            }
            if let Some(&t) = toks.iter().find(|&&t| is_special(t)) {
                return Err(Error::InvalidArgument(format!(
                    "title of item {item} contains special token {t}"
                )));
            }
            let mut cur = 0;
            for &t in toks {
                cur = match nodes[cur].children.get(&t) {
                    Some(&n) => n,
                    None => {
                        nodes.push(Node::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(t, n);
                        n
                    }
                };
            }
            nodes[cur].items.push(item);
        }
        Ok(Self { nodes })
    }

    fn walk(&self, prefix: &[TokenId]) -> Option<usize> {
        let mut cur = 0;
        for t in prefix {
            cur = *self.nodes[cur].children.get(t)?;
        }
        Some(cur)
    }

    /// Tokens that may follow `prefix`, ascending; `EOS` when the prefix is a
    /// complete title.
    pub fn allowed_next(&self, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        let node = self
            .walk(prefix)
            .ok_or_else(|| Error::InvalidPrefix(prefix.to_vec()))?;
        let n = &self.nodes[node];
        let mut out = Vec::with_capacity(n.children.len() + 1);
        if !n.items.is_empty() {
            out.push(EOS);
        }
        out.extend(n.children.keys().copied());
        Ok(out)
    }

    /// Items whose title is exactly `tokens`, ascending by id.
    pub fn items_for(&self, tokens: &[TokenId]) -> Option<&[ItemId]> {
        let node = self.walk(tokens)?;
        let items = &self.nodes[node].items;
        (!items.is_empty()).then_some(items.as_slice())
    }

    /// Number of distinct titles.
    pub fn num_titles(&self) -> usize {
        self.nodes.iter().filter(|n| !n.items.is_empty()).count()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// All complete titles, depth-first in token order.
    pub fn paths(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, prefix)) = stack.pop() {
            if !self.nodes[n].items.is_empty() {
                out.push(prefix.clone());
            }
            for (&t, &c) in self.nodes[n].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}
