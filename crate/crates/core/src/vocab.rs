//! Word-level vocabulary and fixed-length tokenization.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercased runs of alphanumeric characters and underscores, so
/// identifiers such as `user_12` stay single tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ranks words by frequency (ties lexicographic) and keeps the top
    /// entries so the total size including reserved ids is at most
    /// `max_size`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} is below the {} reserved ids",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut docs = 0usize;
        for text in corpus {
            docs += 1;
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Validation("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(t);
            s.push('\t');
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Validation(format!("vocabulary line {}: expected token<TAB>id", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Validation(format!("vocabulary line {}: bad id `{id}`", n + 1)))?;
            if id != tokens.len() {
                return Err(Error::Validation(format!(
                    "vocabulary line {}: id {id} breaks the contiguous range",
                    n + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Validation("vocabulary does not start with the reserved tokens".into()));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Token ids of fixed length with the attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    /// Number of non-PAD positions; they always form a prefix.
    pub fn len_unpadded(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> Result<TokenSequence> {
    if max_seq_len < 2 {
        return Err(Error::Config(format!(
            "max_seq_len must be at least 2 to hold BOS and EOS, got {max_seq_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(BOS);
    ids.extend(words(text).take(max_seq_len - 2).map(|w| vocab.id(&w)));
    ids.push(EOS);
    let used = ids.len();
    ids.resize(max_seq_len, PAD);
    let mask = (0..max_seq_len).map(|i| i < used).collect();
    Ok(TokenSequence { ids, mask })
}
