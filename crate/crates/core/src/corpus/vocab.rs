use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{LabeledSentence, Sentence};
use crate::error::{invalid, Error, Result};

pub const PAD_TOKEN: &str = "[pad]";
pub const UNK_TOKEN: &str = "[unk]";
pub const MASK_TOKEN: &str = "[mask]";

const SPECIALS: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN];

/// Token <-> id mapping. Ids 0..3 are `[pad]`, `[unk]`, `[mask]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from non-special tokens in id order (specials are prepended).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens.into_iter().map(Into::into));
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Number of regular (non-special) entries.
    pub fn num_regular(&self) -> usize {
        self.len() - SPECIALS.len()
    }

    /// Id of the first regular entry; regular ids are contiguous from here.
    pub fn first_regular(&self) -> usize {
        SPECIALS.len()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn mask_id(&self) -> usize {
        2
    }

    pub fn special_ids(&self) -> [usize; 3] {
        [0, 1, 2]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk_id())
    }

    pub fn encode(&self, s: &Sentence) -> Result<LabeledSentence> {
        let ids = s.tokens.iter().map(|t| self.id_or_unk(t)).collect();
        LabeledSentence::new(s.tokens.clone(), ids, s.label)
    }

    pub fn encode_all(&self, sentences: &[Sentence]) -> Result<Vec<LabeledSentence>> {
        sentences.iter().map(|s| self.encode(s)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// First 16 hex digits of SHA-256 over the newline-joined id order.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.id_to_token.join("\n").as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// One token per line, in id order, specials included.
    pub fn to_text(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(invalid("vocabulary file must start with [pad], [unk], [mask]"));
        }
        Vocabulary::from_tokens(lines[SPECIALS.len()..].iter().copied())
    }
}

/// Tokens with corpus frequency `>= min_count`, ordered by frequency
/// descending and then lexicographically.
pub fn build_vocabulary(sentences: &[Sentence], min_count: usize) -> Result<Vocabulary> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("cannot build a vocabulary from no sentences".into()));
    }
    if min_count == 0 {
        return Err(invalid("min_count must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for t in &s.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && !SPECIALS.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}
