use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenizedCatalog, Vocabulary, ANS, BOS, EOS, SEP};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// One prompt entry. Patches occupy a single position regardless of how many
/// title tokens they pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Special(TokenId),
    Raw { item_id: ItemId, tokens: Vec<TokenId> },
    ItemPatch { item_id: ItemId, tokens: Vec<TokenId> },
    SessionPatch { items: Vec<(ItemId, Vec<TokenId>)> },
}

impl Segment {
    pub fn positions(&self) -> usize {
        match self {
            Segment::Special(_) | Segment::ItemPatch { .. } | Segment::SessionPatch { .. } => 1,
            Segment::Raw { tokens, .. } => tokens.len(),
        }
    }

    pub fn source_items(&self) -> Vec<ItemId> {
        match self {
            Segment::Special(_) => vec![],
            Segment::Raw { item_id, .. } | Segment::ItemPatch { item_id, .. } => vec![*item_id],
            Segment::SessionPatch { items } => items.iter().map(|(i, _)| *i).collect(),
        }
    }

    /// Title tokens this segment stands for before any compression.
    pub fn title_tokens(&self) -> usize {
        match self {
            Segment::Special(_) => 0,
            Segment::Raw { tokens, .. } | Segment::ItemPatch { tokens, .. } => tokens.len(),
            Segment::SessionPatch { items } => items.iter().map(|(_, t)| t.len()).sum(),
        }
    }

    pub fn is_history(&self) -> bool {
        !matches!(self, Segment::Special(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    Text,
    PureItem,
    PureSession,
    PftI,
    PftS,
}

impl LayoutMode {
    pub fn name(self) -> &'static str {
        match self {
            LayoutMode::Text => "text",
            LayoutMode::PureItem => "pure_item",
            LayoutMode::PureSession => "pure_session",
            LayoutMode::PftI => "pft_i",
            LayoutMode::PftS => "pft_s",
        }
    }
}

impl std::str::FromStr for LayoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "text" => LayoutMode::Text,
            "pure_item" => LayoutMode::PureItem,
            "pure_session" => LayoutMode::PureSession,
            "pft_i" => LayoutMode::PftI,
            "pft_s" => LayoutMode::PftS,
            other => return Err(Error::Config(format!("unknown layout mode `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    /// Truncation length: most recent items kept.
    pub k: usize,
    /// Most recent items kept as text under `PftI`.
    pub m: usize,
    /// Session group size under `PftS` and `PureSession`.
    pub l: usize,
    pub mode: LayoutMode,
}

impl LayoutConfig {
    pub fn new(mode: LayoutMode, k: usize, m: usize, l: usize) -> Result<Self> {
        let c = Self { k, m, l, mode };
        c.validate()?;
        Ok(c)
    }

    pub fn text(k: usize) -> Self {
        Self {
            k,
            m: k,
            l: 1,
            mode: LayoutMode::Text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("truncation length K must be at least 1".into()));
        }
        if self.m > self.k {
            return Err(Error::Config(format!("M = {} exceeds K = {}", self.m, self.k)));
        }
        if self.l == 0 {
            return Err(Error::Config("session size L must be at least 1".into()));
        }
        Ok(())
    }
}

/// `BOS, h₁, SEP, h₂, …, SEP, h_n, ANS` followed by the target title and `EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub segments: Vec<Segment>,
    /// Target title tokens followed by `EOS`.
    pub target: Vec<TokenId>,
}

impl PromptLayout {
    /// Wraps history segments in the prompt scaffold.
    pub fn assemble(history: Vec<Segment>, target: Vec<TokenId>) -> Self {
        let mut segments = Vec::with_capacity(history.len() * 2 + 2);
        segments.push(Segment::Special(BOS));
        for (i, s) in history.into_iter().enumerate() {
            if i > 0 {
                segments.push(Segment::Special(SEP));
            }
            segments.push(s);
        }
        segments.push(Segment::Special(ANS));
        Self { segments, target }
    }

    /// Prompt positions, target excluded.
    pub fn positions(&self) -> usize {
        self.segments.iter().map(Segment::positions).sum()
    }

    /// Positions spent on item representations (no BOS/SEP/ANS).
    pub fn history_positions(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.is_history())
            .map(Segment::positions)
            .sum()
    }

    /// Title tokens of the history before compression.
    pub fn history_title_tokens(&self) -> usize {
        self.segments.iter().map(Segment::title_tokens).sum()
    }

    /// Positions the model consumes: the prompt plus every target token but the last.
    pub fn model_positions(&self) -> usize {
        self.positions() + self.target.len().saturating_sub(1)
    }

    pub fn source_items(&self) -> Vec<ItemId> {
        self.segments.iter().flat_map(Segment::source_items).collect()
    }

    pub fn history_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.is_history())
    }

    pub fn count_kind(&self, pred: impl Fn(&Segment) -> bool) -> usize {
        self.segments.iter().filter(|s| pred(s)).count()
    }

    /// One line per segment, e.g. `ITEMPATCH(item=42)` or `RAW("madison" "county")`.
    pub fn debug_dump(&self, vocab: &Vocabulary) -> String {
        let quoted = |toks: &[TokenId]| {
            toks.iter()
                .map(|&t| format!("\"{}\"", vocab.token(t).unwrap_or("<?>")))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Special(t) => {
                    let name = vocab.token(*t).unwrap_or("<?>");
                    writeln!(s, "{}", name.trim_matches(['<', '>']).to_uppercase())
                }
                Segment::Raw { tokens, .. } => writeln!(s, "RAW({})", quoted(tokens)),
                Segment::ItemPatch { item_id, .. } => writeln!(s, "ITEMPATCH(item={item_id})"),
                Segment::SessionPatch { items } => {
                    let ids: Vec<String> = items.iter().map(|(i, _)| i.to_string()).collect();
                    writeln!(s, "SESSIONPATCH(items={})", ids.join(","))
                }
            }
            .expect("string write");
        }
        writeln!(s, "TARGET({})", quoted(&self.target)).expect("string write");
        s
    }
}

struct Entry {
    item_id: ItemId,
    tokens: Vec<TokenId>,
}

fn resolve(catalog: &TokenizedCatalog, history: &[ItemId], k: usize) -> Result<Vec<Entry>> {
    if history.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("empty history".into()));
    }
    history[history.len().saturating_sub(k)..]
        .iter()
        .map(|&item_id| {
            let tokens = catalog
                .title(item_id)
                .ok_or_else(|| Error::InvalidArgument(format!("item {item_id} not in catalog")))?
                .to_vec();
            Ok(Entry { item_id, tokens })
        })
        .collect()
}

fn target_tokens(catalog: &TokenizedCatalog, target: Option<ItemId>) -> Result<Vec<TokenId>> {
    let mut t = match target {
        Some(id) => catalog
            .title(id)
            .ok_or_else(|| Error::InvalidArgument(format!("target {id} not in catalog")))?
            .to_vec(),
        None => vec![],
    };
    t.push(EOS);
    Ok(t)
}

fn raw(e: Entry) -> Segment {
    Segment::Raw {
        item_id: e.item_id,
        tokens: e.tokens,
    }
}

fn item_patch(e: Entry) -> Segment {
    Segment::ItemPatch {
        item_id: e.item_id,
        tokens: e.tokens,
    }
}

fn session_patch(group: Vec<Entry>) -> Segment {
    Segment::SessionPatch {
        items: group.into_iter().map(|e| (e.item_id, e.tokens)).collect(),
    }
}

/// Splits into groups of `l`, anchored at the most recent end; the oldest
/// group may be partial. Returned oldest-first.
fn groups_from_recent(entries: Vec<Entry>, l: usize) -> Vec<Vec<Entry>> {
    let n = entries.len();
    let first = n % l;
    let mut out: Vec<Vec<Entry>> = Vec::new();
    for (i, e) in entries.into_iter().enumerate() {
        let start_new = i == 0 || (i >= first && (i - first) % l == 0);
        if start_new {
            out.push(Vec::new());
        }
        out.last_mut().expect("group").push(e);
    }
    out
}

/// Every item as raw title tokens.
pub fn layout_text(
    catalog: &TokenizedCatalog,
    history: &[ItemId],
    target: Option<ItemId>,
    k: usize,
) -> Result<PromptLayout> {
    let entries = resolve(catalog, history, k)?;
    Ok(PromptLayout::assemble(
        entries.into_iter().map(raw).collect(),
        target_tokens(catalog, target)?,
    ))
}

/// Oldest `len - m` items as item patches, newest `m` as text.
pub fn layout_pft_i(
    catalog: &TokenizedCatalog,
    history: &[ItemId],
    target: Option<ItemId>,
    k: usize,
    m: usize,
) -> Result<PromptLayout> {
    let entries = resolve(catalog, history, k)?;
    let n_patch = entries.len().saturating_sub(m);
    let segs = entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| if i < n_patch { item_patch(e) } else { raw(e) })
        .collect();
    Ok(PromptLayout::assemble(segs, target_tokens(catalog, target)?))
}

/// Latest group of `l` as text, the group before it as item patches, and one
/// session patch per earlier group.
pub fn layout_pft_s(
    catalog: &TokenizedCatalog,
    history: &[ItemId],
    target: Option<ItemId>,
    k: usize,
    l: usize,
) -> Result<PromptLayout> {
    if l == 0 {
        return Err(Error::Config("session size L must be at least 1".into()));
    }
    let entries = resolve(catalog, history, k)?;
    let groups = groups_from_recent(entries, l);
    let g = groups.len();
    let mut segs = Vec::new();
    for (gi, group) in groups.into_iter().enumerate() {
        if gi + 1 == g {
            segs.extend(group.into_iter().map(raw));
        } else if gi + 2 == g {
            segs.extend(group.into_iter().map(item_patch));
        } else {
            segs.push(session_patch(group));
        }
    }
    Ok(PromptLayout::assemble(segs, target_tokens(catalog, target)?))
}

/// Every group of `l` (anchored at the recent end) as one session patch.
pub fn layout_pure_session(
    catalog: &TokenizedCatalog,
    history: &[ItemId],
    target: Option<ItemId>,
    k: usize,
    l: usize,
) -> Result<PromptLayout> {
    if l == 0 {
        return Err(Error::Config("session size L must be at least 1".into()));
    }
    let entries = resolve(catalog, history, k)?;
    let segs = groups_from_recent(entries, l)
        .into_iter()
        .map(session_patch)
        .collect();
    Ok(PromptLayout::assemble(segs, target_tokens(catalog, target)?))
}

pub fn build_layout(
    catalog: &TokenizedCatalog,
    history: &[ItemId],
    target: Option<ItemId>,
    cfg: &LayoutConfig,
) -> Result<PromptLayout> {
    cfg.validate()?;
    match cfg.mode {
        LayoutMode::Text => layout_text(catalog, history, target, cfg.k),
        LayoutMode::PftI => layout_pft_i(catalog, history, target, cfg.k, cfg.m),
        LayoutMode::PureItem => layout_pft_i(catalog, history, target, cfg.k, 0),
        LayoutMode::PftS => layout_pft_s(catalog, history, target, cfg.k, cfg.l),
        LayoutMode::PureSession => layout_pure_session(catalog, history, target, cfg.k, cfg.l),
    }
}

/// Text-version history tokens over compressed-version history positions.
pub fn compression_ratio(text: &PromptLayout, compressed: &PromptLayout) -> Result<f64> {
    if text.source_items() != compressed.source_items() {
        return Err(Error::InvalidArgument(
            "layouts were built from different histories".into(),
        ));
    }
    let denom = compressed.history_positions();
    if denom == 0 {
        return Err(Error::InvalidArgument("empty history".into()));
    }
    Ok(text.history_positions() as f64 / denom as f64)
}
