//! Whitespace/punctuation tokenizer and corpus-built vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::data::Example;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Lowercases, splits on whitespace, and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// The four special tokens and nothing else.
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()))
            .expect("specials are distinct")
    }

    /// Builds a vocabulary from specials followed by `tokens`.
    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut vocab = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for token in tokens {
            if vocab.token_to_id.contains_key(&token) {
                return Err(Error::Config(format!("duplicate vocabulary token {token:?}")));
            }
            vocab.token_to_id.insert(token.clone(), vocab.id_to_token.len() as u32);
            vocab.id_to_token.push(token);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Reads the one-token-per-line format; the first four lines must be
    /// the special tokens in id order.
    pub fn read<R: BufRead>(reader: R, source_name: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                source_name: source_name.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            tokens.push(line);
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Parse {
                    source_name: source_name.into(),
                    line: i + 1,
                    message: format!("expected special token {special}"),
                });
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn write<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writer.write_all(self.file_bytes().as_slice())
    }

    fn file_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for token in &self.id_to_token {
            bytes.extend_from_slice(token.as_bytes());
            bytes.push(b'\n');
        }
        bytes
    }

    /// SHA-256 of the vocabulary file contents.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.file_bytes()).into()
    }
}

/// Collects tokens from questions, headers and cells; keeps those seen at
/// least `min_freq` times, ordered by descending frequency then lexically.
pub fn build_vocab(examples: &[Example], min_freq: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut count = |text: &str| {
        for token in tokenize(text) {
            *counts.entry(token).or_default() += 1;
        }
    };
    for e in examples {
        count(&e.question);
        e.table.headers.iter().for_each(|h| count(h));
        e.table.cells().for_each(&mut count);
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, n)| *n >= min_freq.max(1) && !SPECIALS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|(ta, na), (tb, nb)| nb.cmp(na).then_with(|| ta.cmp(tb)));
    Vocab::from_tokens(
        SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t)),
    )
    .expect("counted tokens are distinct")
}

/// Maps tokens to ids; unknown tokens become `[UNK]`.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> Vec<u32> {
    tokens
        .iter()
        .map(|t| vocab.id(t.as_ref()).unwrap_or(UNK_ID))
        .collect()
}

pub fn decode_ids(ids: &[u32], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK).to_string())
        .collect()
}
