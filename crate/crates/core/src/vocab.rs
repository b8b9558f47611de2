//! Whitespace/punctuation tokenizer and the closed token vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; RESERVED] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED
}

/// Lowercases and splits on whitespace; ASCII punctuation becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from every word of `texts`, sorted for stability.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Newline-delimited `token<TAB>id`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("vocab line {}: missing tab", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("vocab line {}: bad id '{id}'", n + 1)))?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        for (expect, (id, _)) in pairs.iter().enumerate() {
            if *id != expect {
                return Err(Error::Data(format!(
                    "vocab ids must be dense from 0, found {id} at slot {expect}"
                )));
            }
        }
        let tokens: Vec<String> = pairs.into_iter().map(|(_, t)| t).collect();
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Data(format!("reserved token {r} must have id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocab token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }
}

/// Token ids padded (or truncated) to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn from_content(content: &[usize], max_len: usize) -> Self {
        let true_length = content.len().min(max_len);
        let mut ids = content[..true_length].to_vec();
        ids.resize(max_len, PAD);
        Self { ids, true_length }
    }

    /// The unpadded prefix.
    pub fn content(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }
}

pub fn tokenize(report: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let ids: Vec<usize> = split_words(report)
        .iter()
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect();
    TokenSequence::from_content(&ids, max_len)
}

/// Model-side report sequence: at most `max_len - 1` words followed by an
/// explicit SEP, so the sequence including its terminator fits `max_len`.
pub fn report_ids(report: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids = tokenize(report, vocab, max_len.saturating_sub(1)).content().to_vec();
    ids.push(SEP);
    ids
}

/// Joins the content tokens with single spaces, stopping at the first PAD.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .take_while(|&&id| id != PAD)
        .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}
