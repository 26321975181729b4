//! Flat input layout: `[CLS] h_1..h_m c_1..c_{r*m} [SEP] w_1..w_n [SEP]`.
//!
//! Headers and cells are single items carrying a bag of token ids; their
//! embedding is the mean of the bag. Question words are one item each.

use std::fmt;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::text::{encode_tokens, tokenize, Vocab, CLS_ID, SEP_ID, UNK_ID};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Item {
    Cls,
    Header { column: usize, tokens: Vec<u32> },
    Cell { index: usize, tokens: Vec<u32> },
    Sep,
    QWord(u32),
}

impl Item {
    /// Token ids whose embeddings are averaged to represent this item.
    pub fn token_ids(&self) -> &[u32] {
        match self {
            Item::Cls => std::slice::from_ref(&CLS_ID),
            Item::Sep => std::slice::from_ref(&SEP_ID),
            Item::QWord(id) => std::slice::from_ref(id),
            Item::Header { tokens, .. } | Item::Cell { tokens, .. } => tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    pub items: Vec<Item>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    /// `cell_positions[k]` is the sequence position of linear cell `k`.
    pub cell_positions: Vec<usize>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_positions.len()
    }

    /// Boolean mask over sequence positions that hold cells.
    pub fn cell_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for &p in &self.cell_positions {
            mask[p] = true;
        }
        mask
    }
}

/// Sequence length for an `r x m` table and an `n`-token question.
pub fn encoded_len(n_rows: usize, n_cols: usize, n_question: usize) -> usize {
    1 + n_cols + n_rows * n_cols + 1 + n_question + 1
}

fn bag(text: &str, vocab: &Vocab) -> Vec<u32> {
    let ids = encode_tokens(&tokenize(text), vocab);
    if ids.is_empty() {
        vec![UNK_ID]
    } else {
        ids
    }
}

/// Encodes an example, or returns `None` (skip) when the sequence would be
/// longer than `max_len`.
pub fn encode_example(example: &Example, vocab: &Vocab, max_len: usize) -> Option<EncodedInput> {
    let table = &example.table;
    let question = encode_tokens(&tokenize(&example.question), vocab);
    let len = encoded_len(table.n_rows(), table.n_cols(), question.len());
    if len > max_len {
        return None;
    }

    let mut items = Vec::with_capacity(len);
    items.push(Item::Cls);
    items.extend(table.headers.iter().enumerate().map(|(column, h)| Item::Header {
        column,
        tokens: bag(h, vocab),
    }));
    let first_cell = items.len();
    items.extend(table.cells().enumerate().map(|(index, c)| Item::Cell {
        index,
        tokens: bag(c, vocab),
    }));
    items.push(Item::Sep);
    let question_start = items.len();
    items.extend(question.into_iter().map(Item::QWord));
    items.push(Item::Sep);

    Some(EncodedInput {
        position_ids: (0..len).collect(),
        segment_ids: (0..len).map(|p| u8::from(p >= question_start)).collect(),
        cell_positions: (first_cell..first_cell + table.n_cells()).collect(),
        items,
    })
}

/// Sequence position of the gold cell.
pub fn target_position(encoded: &EncodedInput, answer_index: usize) -> Result<usize> {
    encoded
        .cell_positions
        .get(answer_index)
        .copied()
        .ok_or(Error::IndexOutOfRange {
            what: "answer cell",
            index: answer_index,
            len: encoded.n_cells(),
        })
}

/// Debug rendering: one aligned line per item.
pub struct EncodingDisplay<'a> {
    pub encoded: &'a EncodedInput,
    pub vocab: &'a Vocab,
}

impl fmt::Display for EncodingDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>4} {:>3}  {:<10} tokens", "pos", "seg", "item")?;
        for (p, item) in self.encoded.items.iter().enumerate() {
            let kind = match item {
                Item::Cls => "CLS".to_string(),
                Item::Sep => "SEP".to_string(),
                Item::QWord(_) => "QWORD".to_string(),
                Item::Header { column, .. } => format!("HEADER({column})"),
                Item::Cell { index, .. } => format!("CELL({index})"),
            };
            let tokens: Vec<&str> = item
                .token_ids()
                .iter()
                .map(|&id| self.vocab.token(id).unwrap_or("?"))
                .collect();
            writeln!(
                f,
                "{:>4} {:>3}  {:<10} {}",
                self.encoded.position_ids[p],
                self.encoded.segment_ids[p],
                kind,
                tokens.join(" ")
            )?;
        }
        Ok(())
    }
}
