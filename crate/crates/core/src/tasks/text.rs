use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::initializers::Rng;
use crate::model::Targets;

use super::{Dataset, Examples};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// First distractor id in the long-range task; ids 2 and 3 are the signals.
const LONGRANGE_SIGNAL: usize = 2;
const LONGRANGE_FIRST_DISTRACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    words: Vec<String>,
}

impl Vocab {
    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.words.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            _ => self.words.get(id - 2).map(String::as_str),
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Keeps the `max_words` most frequent tokens (ties in lexicographic order)
/// after the reserved `pad = 0` and `unk = 1` ids.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], max_words: usize) -> Result<Vocab> {
    if corpus.iter().all(|d| d.is_empty()) {
        return Err(Error::InvalidArgument(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let words: Vec<String> = ranked.into_iter().take(max_words).map(|(w, _)| w.to_owned()).collect();
    let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i + 2)).collect();
    Ok(Vocab { index, words })
}

/// Reads `label<TAB>text` lines.
pub fn load_labeled_text(path: impl AsRef<Path>) -> Result<Vec<(usize, Vec<String>)>> {
    let raw = fs::read_to_string(path)?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let (label, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected label<TAB>text", n + 1)))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("line {}: bad label '{label}'", n + 1)))?;
            Ok((label, tokenize(text)))
        })
        .collect()
}

/// Binary sequences whose label is carried by a single signal token placed
/// at least `gap` steps before the end; every other token is a uniform
/// distractor from `[4, vocab)`.
pub fn gen_longrange_text(n: usize, len: usize, gap: usize, vocab: usize, rng: &mut Rng) -> Result<Vec<TokenSequence>> {
    if gap >= len {
        return Err(Error::InvalidArgument(format!(
            "gap {gap} must be shorter than length {len}"
        )));
    }
    if vocab <= LONGRANGE_FIRST_DISTRACTOR {
        return Err(Error::InvalidArgument(format!(
            "vocabulary of {vocab} leaves no distractors"
        )));
    }
    Ok((0..n)
        .map(|_| {
            let label = rng.index(0, 2);
            let mut ids: Vec<usize> = (0..len).map(|_| rng.index(LONGRANGE_FIRST_DISTRACTOR, vocab)).collect();
            // distance from the end, len - 1 - pos, is at least gap
            let pos = rng.index(0, len - gap);
            ids[pos] = LONGRANGE_SIGNAL + label;
            TokenSequence { ids, label }
        })
        .collect())
}

pub fn to_dataset(seqs: &[TokenSequence]) -> Dataset {
    Dataset {
        examples: Examples::Tokens(seqs.iter().map(|s| s.ids.clone()).collect()),
        targets: Targets::Classes(seqs.iter().map(|s| s.label).collect()),
    }
}
