//! Lowercased word-level tokenizer over item titles.

use crate::data::{Catalog, ItemId};
use crate::error::{Error, Result};
use crate::trie::TitleTrie;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const ANS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const UNK: TokenId = 4;
pub const SPECIALS: [&str; 5] = ["<bos>", "<sep>", "<ans>", "<eos>", "<unk>"];

pub fn is_special(t: TokenId) -> bool {
    (t as usize) < SPECIALS.len()
}

/// Splits on anything that is not alphanumeric, lowercasing each word.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials first, then words in order of first occurrence across titles.
    pub fn build(catalog: &Catalog) -> Self {
        let mut v = Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect())
            .expect("specials are distinct");
        for item in catalog.items() {
            for w in words(&item.title) {
                if !v.index.contains_key(&w) {
                    v.index.insert(w.clone(), v.tokens.len() as TokenId);
                    v.tokens.push(w);
                }
            }
        }
        v
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        words(text).map(|w| self.id(&w).unwrap_or(UNK)).collect()
    }

    pub fn tokenize_title(&self, item_id: ItemId, title: &str) -> Result<Vec<TokenId>> {
        let ids = self.tokenize(title);
        if ids.is_empty() {
            return Err(Error::EmptyTitle(item_id));
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `id<TAB>token` per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(s, "{i}\t{t}").expect("string write");
        }
        s
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::VocabMismatch(format!("line {}: expected id<TAB>token", no + 1)))?;
            if id.parse::<usize>().ok() != Some(tokens.len()) {
                return Err(Error::VocabMismatch(format!("line {}: ids must be dense", no + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::VocabMismatch("special tokens missing".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.dump())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_dump(&fs::read_to_string(path)?)
    }
}

/// Catalog titles resolved to token ids, plus the prefix tree over them.
#[derive(Clone, Debug)]
pub struct TokenizedCatalog {
    pub vocab: Vocabulary,
    titles: BTreeMap<ItemId, Vec<TokenId>>,
    pub trie: TitleTrie,
}

impl TokenizedCatalog {
    pub fn new(catalog: &Catalog) -> Result<Self> {
        Self::with_vocab(catalog, Vocabulary::build(catalog))
    }

    pub fn with_vocab(catalog: &Catalog, vocab: Vocabulary) -> Result<Self> {
        let titles = catalog
            .items()
            .iter()
            .map(|i| Ok((i.item_id, vocab.tokenize_title(i.item_id, &i.title)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let trie = TitleTrie::build(&titles)?;
        Ok(Self { vocab, titles, trie })
    }

    pub fn title(&self, item: ItemId) -> Option<&[TokenId]> {
        self.titles.get(&item).map(Vec::as_slice)
    }

    pub fn titles(&self) -> &BTreeMap<ItemId, Vec<TokenId>> {
        &self.titles
    }

    pub fn mean_title_tokens(&self) -> f64 {
        let total: usize = self.titles.values().map(Vec::len).sum();
        total as f64 / self.titles.len().max(1) as f64
    }
}
