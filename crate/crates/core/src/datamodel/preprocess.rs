//! Text normalization and tokenization for Vietnamese-flavored review text.
//!
//! The pipeline is deliberately small: Unicode NFC normalization, lowercasing,
//! control-character removal, whitespace tokenization, an optional
//! user-supplied token replacement table (for abbreviations), and an optional
//! longest-match multi-word merge against a user-supplied lexicon. Merged
//! words are joined with underscores. The whole pipeline can be disabled,
//! leaving plain whitespace splitting.

use std::collections::BTreeMap;

use unicode_normalization::UnicodeNormalization;

/// Configuration for [`preprocess`].
#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    /// Master switch. When false, input is split on whitespace and nothing
    /// else happens.
    pub enabled: bool,
    /// Token-level replacements applied after splitting; a replacement value
    /// may contain spaces and expands to several tokens.
    pub replacements: BTreeMap<String, String>,
    /// Multi-word entries (space-separated) merged into single underscore
    /// tokens by greedy longest match.
    pub lexicon: Vec<String>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            enabled: true,
            replacements: BTreeMap::new(),
            lexicon: Vec::new(),
        }
    }
}

impl PreprocessOptions {
    /// Options with the pipeline disabled (whitespace splitting only).
    pub fn disabled() -> Self {
        PreprocessOptions {
            enabled: false,
            ..PreprocessOptions::default()
        }
    }
}

/// Normalizes and tokenizes raw review text. Empty input yields an empty
/// token list; the function never fails.
pub fn preprocess(raw: &str, options: &PreprocessOptions) -> Vec<String> {
    if !options.enabled {
        return raw.split_whitespace().map(str::to_owned).collect();
    }
    let normalized: String = raw
        .nfc()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect();
    let mut tokens: Vec<String> = normalized.split_whitespace().map(str::to_owned).collect();
    if !options.replacements.is_empty() {
        tokens = tokens
            .into_iter()
            .flat_map(|t| match options.replacements.get(&t) {
                Some(expansion) => expansion.split_whitespace().map(str::to_owned).collect(),
                None => vec![t],
            })
            .collect();
    }
    if !options.lexicon.is_empty() {
        tokens = merge_lexicon(tokens, &options.lexicon);
    }
    tokens
}

/// Greedy longest-match merge: at each position, the longest lexicon entry
/// matching the upcoming tokens is collapsed into one underscore-joined token.
fn merge_lexicon(tokens: Vec<String>, lexicon: &[String]) -> Vec<String> {
    let entries: Vec<Vec<&str>> = {
        let mut e: Vec<Vec<&str>> = lexicon
            .iter()
            .map(|entry| entry.split_whitespace().collect())
            .filter(|words: &Vec<&str>| words.len() >= 2)
            .collect();
        e.sort_by_key(|words| std::cmp::Reverse(words.len()));
        e
    };
    if entries.is_empty() {
        return tokens;
    }
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let matched = entries.iter().find(|words| {
            i + words.len() <= tokens.len()
                && words.iter().zip(&tokens[i..]).all(|(w, t)| *w == t)
        });
        match matched {
            Some(words) => {
                out.push(words.join("_"));
                i += words.len();
            }
            None => {
                out.push(tokens[i].clone());
                i += 1;
            }
        }
    }
    out
}
