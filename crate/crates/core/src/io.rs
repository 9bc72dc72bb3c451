//! Token files and a whitespace tokenizer for demo corpora.
//!
//! Token files hold one integer id per line. A vocabulary file holds one
//! word per line; the line number (from 0) is the word's id.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::TokenSeq;

pub fn parse_tokens(text: &str) -> Result<TokenSeq> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.parse::<u32>()
                .map_err(|e| Error::parse("token file", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Documents separated by blank lines, one token per line.
pub fn parse_corpus(text: &str) -> Result<Vec<TokenSeq>> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
            continue;
        }
        current.push(
            line.parse::<u32>()
                .map_err(|e| Error::parse("corpus file", format!("line {}: {e}", i + 1)))?,
        );
    }
    if !current.is_empty() {
        docs.push(current);
    }
    Ok(docs)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<TokenSeq>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn format_tokens(tokens: &[u32]) -> String {
    let mut out = String::with_capacity(tokens.len() * 6);
    for t in tokens {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    out
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<TokenSeq> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tokens(&text)
}

pub fn write_tokens(path: impl AsRef<Path>, tokens: &[u32]) -> Result<()> {
    write_text(path, &format_tokens(tokens))
}

pub(crate) fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Checks every token id is below `vocab_size`.
pub fn check_vocab(tokens: &[u32], vocab_size: usize) -> Result<()> {
    match tokens.iter().position(|&t| t as usize >= vocab_size) {
        Some(i) => Err(Error::Data(format!(
            "token {} at position {i} is outside a vocabulary of {vocab_size}",
            tokens[i]
        ))),
        None => Ok(()),
    }
}

/// Word-level vocabulary. Id 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const UNK: &'static str = "<unk>";

    pub fn new() -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.intern(Self::UNK);
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    /// Tokenizes `text`, adding unseen words when `grow` is set and mapping
    /// them to `<unk>` otherwise.
    pub fn encode(&mut self, text: &str, grow: bool) -> TokenSeq {
        text.split_whitespace()
            .map(|w| {
                if grow {
                    self.intern(w)
                } else {
                    self.index.get(w).copied().unwrap_or(0)
                }
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or(Self::UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::parse("vocabulary file", format!("line {}: bad word {line:?}", i + 1)));
            }
            if v.intern(line) as usize != i {
                return Err(Error::parse("vocabulary file", format!("line {}: duplicate word {line:?}", i + 1)));
            }
        }
        if v.words.first().map(String::as_str) != Some(Self::UNK) {
            return Err(Error::parse("vocabulary file", "first entry must be <unk>"));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        write_text(path, &text)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}
