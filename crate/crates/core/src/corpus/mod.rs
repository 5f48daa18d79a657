//! Sentences, labels, vocabularies and bag-of-words targets.

mod dataset;
mod synthetic;
mod vocab;

pub use dataset::{load_dataset, DatasetFormat, LoadedDataset, Rejection};
pub use synthetic::{generate_synthetic_corpus, SyntheticGrammar, SyntheticSentence};
pub use vocab::{build_vocabulary, Vocabulary, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Binary sentence-level sentiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Negative, Label::Positive];

    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }

    /// Accepts `0`/`1` and `negative`/`positive` in any case.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0" | "negative" => Some(Label::Negative),
            "1" | "positive" => Some(Label::Positive),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Word-level polarity used by the polarity head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::Neutral => 1,
            Polarity::Positive => 2,
        }
    }

    pub fn of_label(label: Label) -> Polarity {
        match label {
            Label::Negative => Polarity::Negative,
            Label::Positive => Polarity::Positive,
        }
    }
}

/// Lowercase, then split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// A tokenized sentence with its label, before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub label: Label,
}

impl Sentence {
    pub fn new(text: &str, label: Label) -> Self {
        Sentence {
            tokens: tokenize(text),
            label,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A sentence with vocabulary ids; `tokens`, `token_ids` have equal non-zero length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    tokens: Vec<String>,
    token_ids: Vec<usize>,
    label: Label,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, token_ids: Vec<usize>, label: Label) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sentence has no tokens".into()));
        }
        if tokens.len() != token_ids.len() {
            return Err(invalid(format!(
                "{} tokens but {} ids",
                tokens.len(),
                token_ids.len()
            )));
        }
        Ok(LabeledSentence {
            tokens,
            token_ids,
            label,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn with_label(&self, label: Label) -> Self {
        LabeledSentence {
            label,
            ..self.clone()
        }
    }
}

/// Probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BowDistribution {
    pub probs: Vec<f64>,
}

/// Probability vector over the two labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelDistribution {
    pub probs: [f64; 2],
}

impl LabelDistribution {
    pub fn new(probs: [f64; 2]) -> Result<Self> {
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (probs[0] + probs[1] - 1.0).abs() > 1e-6
        {
            return Err(invalid(format!("{probs:?} is not a distribution")));
        }
        Ok(LabelDistribution { probs })
    }

    pub fn one_hot(label: Label) -> Self {
        let mut probs = [0.0; 2];
        probs[label.index()] = 1.0;
        LabelDistribution { probs }
    }
}

/// `count(w, x) / N` over in-vocabulary tokens; unknown tokens are dropped
/// and the remaining mass renormalized.
pub fn bow_distribution(x: &LabeledSentence, v: &Vocabulary) -> Result<BowDistribution> {
    let mut probs = vec![0.0; v.len()];
    let mut counted = 0usize;
    for &id in x.token_ids() {
        if id >= v.len() {
            return Err(invalid(format!("token id {id} outside vocabulary")));
        }
        if v.is_special(id) {
            continue;
        }
        probs[id] += 1.0;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::EmptyInput(
            "sentence has no in-vocabulary tokens".into(),
        ));
    }
    let n = counted as f64;
    for p in &mut probs {
        *p /= n;
    }
    Ok(BowDistribution { probs })
}

/// Regular vocabulary ids whose add-one smoothed frequency ratio between
/// the two labels, `(max + 1) / (min + 1)`, is at least `threshold`.
pub fn label_salient_ids(data: &[LabeledSentence], v: &Vocabulary, threshold: f64) -> Vec<usize> {
    let mut counts = vec![[0usize; 2]; v.len()];
    for x in data {
        for &id in x.token_ids() {
            if id < v.len() {
                counts[id][x.label().index()] += 1;
            }
        }
    }
    (v.first_regular()..v.len())
        .filter(|&id| {
            let [a, b] = counts[id];
            (a.max(b) + 1) as f64 / (a.min(b) + 1) as f64 >= threshold
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn vocab_of(texts: &[&str]) -> Vocabulary {
        let s: Vec<Sentence> = texts.iter().map(|t| Sentence::new(t, Label::Positive)).collect();
        build_vocabulary(&s, 1).unwrap()
    }

    #[test]
    fn salient_ids_use_add_one_label_ratio() {
        let mut texts = vec![("good food", Label::Positive); 4];
        texts.push(("bad food", Label::Negative));
        let raw: Vec<Sentence> = texts.iter().map(|(t, l)| Sentence::new(t, *l)).collect();
        let v = build_vocabulary(&raw, 1).unwrap();
        let data = v.encode_all(&raw).unwrap();
        // good 5/1, bad 2/1, food 5/2
        assert_eq!(label_salient_ids(&data, &v, 5.0), vec![v.id("good").unwrap()]);
        let mut all = label_salient_ids(&data, &v, 2.0);
        all.sort_unstable();
        let mut want: Vec<usize> = ["good", "bad", "food"].iter().map(|w| v.id(w).unwrap()).collect();
        want.sort_unstable();
        assert_eq!(all, want);
        assert!(label_salient_ids(&data, &v, 6.0).is_empty());
    }

    #[test]
    fn bow_counts_over_length() {
        let v = vocab_of(&["good good food", "bad"]);
        let x = v.encode(&Sentence::new("good good food", Label::Positive)).unwrap();
        let b = bow_distribution(&x, &v).unwrap();
        assert!((b.probs[v.id("good").unwrap()] - 2.0 / 3.0).abs() < 1e-15);
        assert!((b.probs[v.id("food").unwrap()] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(b.probs[v.id("bad").unwrap()], 0.0);
    }

    #[test]
    fn bow_single_token_is_one_hot() {
        let v = vocab_of(&["food"]);
        let x = v.encode(&Sentence::new("food", Label::Negative)).unwrap();
        let b = bow_distribution(&x, &v).unwrap();
        assert_eq!(b.probs[v.id("food").unwrap()], 1.0);
        assert_eq!(b.probs.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn bow_drops_unknowns_and_renormalizes() {
        let v = vocab_of(&["good food"]);
        let x = v.encode(&Sentence::new("good mystery", Label::Positive)).unwrap();
        assert_eq!(x.token_ids()[1], v.unk_id());
        let b = bow_distribution(&x, &v).unwrap();
        assert_eq!(b.probs[v.id("good").unwrap()], 1.0);
        assert_eq!(b.probs[v.unk_id()], 0.0);

        let all_unk = v.encode(&Sentence::new("zzz", Label::Positive)).unwrap();
        assert!(bow_distribution(&all_unk, &v).is_err());
    }

    #[test]
    fn labeled_sentence_rejects_empty() {
        assert!(LabeledSentence::new(vec![], vec![], Label::Positive).is_err());
        assert!(LabeledSentence::new(vec!["a".into()], vec![], Label::Positive).is_err());
    }

    #[test]
    fn label_parsing() {
        assert_eq!(Label::parse("1"), Some(Label::Positive));
        assert_eq!(Label::parse(" Negative "), Some(Label::Negative));
        assert_eq!(Label::parse("2"), None);
        assert_eq!(Label::Positive.opposite(), Label::Negative);
    }

    #[test]
    fn label_distribution_validation() {
        assert!(LabelDistribution::new([0.3, 0.7]).is_ok());
        assert!(LabelDistribution::new([0.3, 0.6]).is_err());
        assert!(LabelDistribution::new([-0.1, 1.1]).is_err());
    }

    const WORDS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

    proptest! {
        #[test]
        fn bow_matches_brute_force_counts(idx in proptest::collection::vec(0usize..8, 1..20)) {
            let text: Vec<&str> = idx.iter().map(|&i| WORDS[i]).collect();
            let text = text.join(" ");
            let v = vocab_of(&[&WORDS.join(" ")]);
            let x = v.encode(&Sentence::new(&text, Label::Positive)).unwrap();
            let b = bow_distribution(&x, &v).unwrap();

            let mut counts: HashMap<&str, usize> = HashMap::new();
            for w in text.split(' ') {
                *counts.entry(w).or_default() += 1;
            }
            for w in WORDS {
                let expected = counts.get(w).copied().unwrap_or(0) as f64 / idx.len() as f64;
                prop_assert!((b.probs[v.id(w).unwrap()] - expected).abs() < 1e-12);
            }
            prop_assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for s in v.special_ids() {
                prop_assert_eq!(b.probs[s], 0.0);
            }
        }
    }
}
