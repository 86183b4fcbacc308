use std::collections::{BTreeSet, HashMap};

use crate::arabic_text::normalize;
use crate::dataset::QaRecord;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
pub const UNK: u32 = 4;
pub const N_RESERVED: u32 = 5;

/// Codepoint vocabulary. Ids `0..5` are `<pad> <bos> <sep> <eos> <unk>`;
/// the remaining ids follow codepoint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Vocab {
        let sorted: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = sorted.into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + N_RESERVED))
            .collect();
        Vocab { chars, index }
    }

    pub fn size(&self) -> usize {
        self.chars.len() + N_RESERVED as usize
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Drops `<pad> <bos> <sep> <eos>`; `<unk>` decodes to U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                PAD | BOS | SEP | EOS => None,
                UNK => Some('\u{FFFD}'),
                _ => self
                    .chars
                    .get((id - N_RESERVED) as usize)
                    .copied()
                    .or(Some('\u{FFFD}')),
            })
            .collect()
    }
}

/// Every codepoint of the normalized questions and answers.
pub fn build_vocab(corpus: &[QaRecord]) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut chars = BTreeSet::new();
    for r in corpus {
        chars.extend(normalize(&r.question).as_str().chars());
        chars.extend(normalize(&r.answer).as_str().chars());
    }
    Ok(Vocab::from_chars(chars))
}
