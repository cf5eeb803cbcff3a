//! Token vocabulary with a fixed reserved block.
//!
//! Ids 0..10 are reserved: `<s>`, `</s>`, `<pad>`, `<unk>`, then the six
//! aspect-name tokens in canonical order. Corpus tokens are assigned ids from
//! 10 upward in order of descending frequency (ties broken lexicographically),
//! and the on-disk format is one non-reserved token per line, so line number
//! plus the reserved offset is the id.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::datamodel::types::AspectCategory;
use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
/// First id after the reserved block.
pub const RESERVED: u32 = 10;

const RESERVED_TOKENS: [&str; 4] = ["<s>", "</s>", "<pad>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Non-reserved tokens; index i holds the token with id RESERVED + i.
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from a token corpus. Tokens colliding with
    /// reserved entries (aspect names, special markers) are not duplicated.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for token in corpus {
            *counts.entry(token).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !is_reserved_token(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned())).expect(
            "ranked corpus tokens are unique and non-reserved by construction",
        )
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Vocabulary> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let mut ids = BTreeMap::new();
        for (i, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::format(format!(
                    "vocabulary token {token:?} is empty or contains whitespace"
                )));
            }
            if is_reserved_token(token) {
                return Err(Error::format(format!(
                    "vocabulary token {token:?} collides with a reserved entry"
                )));
            }
            if ids.insert(token.clone(), RESERVED + i as u32).is_some() {
                return Err(Error::format(format!("duplicate vocabulary token {token:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Total number of ids, including the reserved block.
    pub fn len(&self) -> usize {
        RESERVED as usize + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved block is always present
    }

    /// Id for a token, if known (reserved entries included).
    pub fn id(&self, token: &str) -> Option<u32> {
        if let Some(i) = RESERVED_TOKENS.iter().position(|t| *t == token) {
            return Some(i as u32);
        }
        if let Some(a) = AspectCategory::ALL.iter().find(|a| a.token() == token) {
            return Some(4 + a.index() as u32);
        }
        self.ids.get(token).copied()
    }

    /// Id for a token, falling back to `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    /// Token text for an id, if in range.
    pub fn token(&self, id: u32) -> Option<&str> {
        if let Some(t) = RESERVED_TOKENS.get(id as usize) {
            return Some(t);
        }
        if (4..RESERVED).contains(&id) {
            return Some(AspectCategory::ALL[id as usize - 4].token());
        }
        self.tokens.get((id - RESERVED) as usize).map(String::as_str)
    }

    /// Id of an aspect-name token (always reserved).
    pub fn aspect_id(aspect: AspectCategory) -> u32 {
        4 + aspect.index() as u32
    }

    /// Encodes tokens, mapping unknown ones to `<unk>`.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// Writes the non-reserved tokens, one per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Reads a vocabulary written by [`Vocabulary::save`].
    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tokens(text.lines().map(str::to_owned))
    }
}

fn is_reserved_token(token: &str) -> bool {
    RESERVED_TOKENS.contains(&token)
        || AspectCategory::ALL.iter().any(|a| a.token() == token)
}
