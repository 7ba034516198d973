use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD: &str = "<pad>";
const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary whose regular entries start at id 2, in the given
    /// order. Repeated tokens keep their first id.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            token_to_id: HashMap::from([(PAD.to_string(), PAD_ID), (UNK.to_string(), UNK_ID)]),
            id_to_token: vec![PAD.to_string(), UNK.to_string()],
        };
        for t in tokens {
            let t = t.as_ref();
            if !v.token_to_id.contains_key(t) {
                v.token_to_id.insert(t.to_string(), v.id_to_token.len());
                v.id_to_token.push(t.to_string());
            }
        }
        v
    }

    /// Frequency-ordered vocabulary over tokenized texts; ties break
    /// lexicographically so the result is independent of input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t))
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(list: Vec<String>) -> Result<Self, String> {
        if list.len() < 2 || list[PAD_ID] != PAD || list[UNK_ID] != UNK {
            return Err("vocabulary must start with <pad>, <unk>".into());
        }
        let v = Self::from_tokens(&list[2..]);
        if v.size() != list.len() {
            return Err("vocabulary contains duplicate tokens".into());
        }
        Ok(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDocument {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

impl TokenizedDocument {
    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }
}

/// Lowercases, splits on whitespace, and separates every punctuation
/// character into its own token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn tokenize(doc_id: impl Into<String>, text: &str, vocab: &Vocabulary) -> Result<TokenizedDocument> {
    let tokens = split_tokens(text);
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Ok(TokenizedDocument { doc_id: doc_id.into(), tokens, ids })
}
