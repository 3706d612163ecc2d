//! Words over the operator alphabet `{A, N}` and the bilinear Markov sequence
//! they index.
//!
//! The Markov value of a word `l_1 l_2 … l_m` is `C · l_1 · l_2 ⋯ l_m · B`.
//! Block `j` of the sequence holds all words of length `j - 1`; inside a block
//! a word's offset is its binary value with the leftmost letter as the most
//! significant bit (`A = 0`, `N = 1`). That is the column order produced by the
//! reachability recursion `R_j = [A R_{j-1}, N R_{j-1}]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Letter {
    A,
    N,
}

impl Letter {
    fn bit(self) -> usize {
        match self {
            Letter::A => 0,
            Letter::N => 1,
        }
    }

    fn from_bit(bit: usize) -> Self {
        if bit & 1 == 0 {
            Letter::A
        } else {
            Letter::N
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Word(pub Vec<Letter>);

impl Word {
    pub fn empty() -> Self {
        Word(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn letters(&self) -> &[Letter] {
        &self.0
    }

    /// Word of `len` letters spelled by `code`, leftmost letter = most significant bit.
    pub fn from_code(code: usize, len: usize) -> Self {
        Word(
            (0..len)
                .map(|i| Letter::from_bit(code >> (len - 1 - i)))
                .collect(),
        )
    }

    /// Binary value with the leftmost letter as the most significant bit.
    pub fn code(&self) -> usize {
        self.0.iter().fold(0, |acc, l| (acc << 1) | l.bit())
    }

    /// The word labelling column `col` of the reachability matrix.
    pub fn from_flat(flat: usize) -> Self {
        let (block, offset) = split_flat(flat);
        Word::from_code(offset, block - 1)
    }

    pub fn concat(&self, other: &Word) -> Word {
        let mut letters = self.0.clone();
        letters.extend_from_slice(&other.0);
        Word(letters)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("ε");
        }
        for l in &self.0 {
            f.write_str(match l {
                Letter::A => "A",
                Letter::N => "N",
            })?;
        }
        Ok(())
    }
}

impl FromStr for Word {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|ch| match ch {
                'A' | 'a' => Ok(Letter::A),
                'N' | 'n' => Ok(Letter::N),
                other => Err(Error::Contract(format!("unknown letter {other:?} in word"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Word)
    }
}

/// Position of a word inside a Markov sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordIndex {
    /// 1-based block number, equal to word length + 1.
    pub block: usize,
    /// Offset inside the block.
    pub offset: usize,
    /// 0-based position in the flattened sequence.
    pub flat: usize,
}

pub fn word_index(word: &Word) -> WordIndex {
    let block = word.len() + 1;
    let offset = word.code();
    WordIndex {
        block,
        offset,
        flat: (1usize << (block - 1)) - 1 + offset,
    }
}

/// `(block, offset)` of a flat position; blocks are 1-based.
pub(crate) fn split_flat(flat: usize) -> (usize, usize) {
    let block = (usize::BITS - (flat + 1).leading_zeros()) as usize;
    (block, flat + 1 - (1usize << (block - 1)))
}

/// Number of Markov values in a sequence of the given depth, `2^depth - 1`.
pub fn markov_len(depth: usize) -> usize {
    (1usize << depth) - 1
}

/// The bilinear Markov parameters `w_1 … w_L`, stored flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarkovFile", into = "MarkovFile")]
pub struct MarkovSequence {
    depth: usize,
    flat: Vec<f64>,
}

impl MarkovSequence {
    pub fn from_flat(flat: Vec<f64>) -> Result<Self> {
        let len = flat.len();
        if len == 0 || !(len + 1).is_power_of_two() {
            return Err(Error::Dimension(format!(
                "Markov sequence length {len} is not of the form 2^L - 1"
            )));
        }
        if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Markov value at position {pos}")));
        }
        let depth = (len + 1).trailing_zeros() as usize;
        Ok(MarkovSequence { depth, flat })
    }

    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        for (j, block) in blocks.iter().enumerate() {
            if block.len() != 1 << j {
                return Err(Error::Dimension(format!(
                    "block w_{} has length {}, expected {}",
                    j + 1,
                    block.len(),
                    1usize << j
                )));
            }
        }
        Self::from_flat(blocks.concat())
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    /// Block `w_j` (1-based), of length `2^(j - 1)`.
    pub fn block(&self, j: usize) -> &[f64] {
        assert!(j >= 1 && j <= self.depth, "block {j} outside 1..={}", self.depth);
        let start = (1usize << (j - 1)) - 1;
        &self.flat[start..start + (1 << (j - 1))]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        (1..=self.depth).map(move |j| self.block(j))
    }

    /// Markov value of a word, if the sequence is deep enough to hold it.
    pub fn get(&self, word: &Word) -> Option<f64> {
        self.flat.get(word_index(word).flat).copied()
    }

    /// Leading `depth` blocks.
    pub fn truncate(&self, depth: usize) -> Result<Self> {
        if depth == 0 || depth > self.depth {
            return Err(Error::InsufficientDepth {
                required: depth,
                available: self.depth,
            });
        }
        Ok(MarkovSequence {
            depth,
            flat: self.flat[..markov_len(depth)].to_vec(),
        })
    }

    /// Largest absolute entrywise difference; sequences must have equal depth.
    pub fn max_abs_diff(&self, other: &MarkovSequence) -> f64 {
        assert_eq!(self.depth, other.depth, "depth mismatch");
        self.flat
            .iter()
            .zip(&other.flat)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct MarkovFile {
    format: String,
    version: u32,
    depth: usize,
    flat: Vec<f64>,
}

pub(crate) const MARKOV_FORMAT: &str = "bilinid-markov";

impl From<MarkovSequence> for MarkovFile {
    fn from(w: MarkovSequence) -> Self {
        MarkovFile {
            format: MARKOV_FORMAT.into(),
            version: 1,
            depth: w.depth,
            flat: w.flat,
        }
    }
}

impl TryFrom<MarkovFile> for MarkovSequence {
    type Error = Error;

    fn try_from(file: MarkovFile) -> Result<Self> {
        if file.format != MARKOV_FORMAT || file.version != 1 {
            return Err(Error::Format(format!(
                "expected {MARKOV_FORMAT} version 1, found {} version {}",
                file.format, file.version
            )));
        }
        let w = MarkovSequence::from_flat(file.flat)?;
        if w.depth != file.depth {
            return Err(Error::Format(format!(
                "declared depth {} does not match {} values",
                file.depth,
                w.flat.len()
            )));
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_word_is_first_entry() {
        let idx = word_index(&Word::empty());
        assert_eq!((idx.block, idx.offset, idx.flat), (1, 0, 0));
    }

    #[test]
    fn word_positions() {
        let an: Word = "AN".parse().unwrap();
        assert_eq!(word_index(&an), WordIndex { block: 3, offset: 1, flat: 4 });
        let nnn: Word = "NNN".parse().unwrap();
        assert_eq!(word_index(&nnn), WordIndex { block: 4, offset: 7, flat: 14 });
    }

    #[test]
    fn flat_round_trip() {
        for flat in 0..127 {
            let w = Word::from_flat(flat);
            assert_eq!(word_index(&w).flat, flat);
        }
    }

    #[test]
    fn bad_lengths_rejected() {
        assert!(MarkovSequence::from_flat(vec![]).is_err());
        assert!(MarkovSequence::from_flat(vec![1.0, 2.0]).is_err());
        assert!(MarkovSequence::from_flat(vec![1.0, f64::NAN, 0.0]).is_err());
        assert!(MarkovSequence::from_blocks(&[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn blocks_have_doubling_lengths() {
        let w = MarkovSequence::from_flat((0..15).map(f64::from).collect()).unwrap();
        assert_eq!(w.depth(), 4);
        let lens: Vec<_> = w.blocks().map(<[f64]>::len).collect();
        assert_eq!(lens, vec![1, 2, 4, 8]);
        assert_eq!(w.block(3), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w.blocks().flatten().copied().collect::<Vec<_>>(), w.flat());
    }

    #[test]
    fn display_and_parse() {
        let w: Word = "ANNA".parse().unwrap();
        assert_eq!(w.to_string(), "ANNA");
        assert_eq!(Word::empty().to_string(), "ε");
        assert!("AXN".parse::<Word>().is_err());
    }
}
