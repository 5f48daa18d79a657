//! Shared fixtures for the benchmarks in `benches/`.

use amst_core::corpus::{build_vocabulary, generate_synthetic_corpus, LabeledSentence, Sentence, SyntheticGrammar, Vocabulary};

/// `count` synthetic sentences encoded against their own vocabulary.
pub fn synthetic(count: usize) -> (Vocabulary, Vec<LabeledSentence>) {
    let g = SyntheticGrammar::restaurant(5);
    let raw: Vec<Sentence> = generate_synthetic_corpus(&g, count)
        .expect("built-in grammar generates")
        .into_iter()
        .map(|s| s.sentence)
        .collect();
    let v = build_vocabulary(&raw, 1).expect("non-empty corpus");
    let data = v.encode_all(&raw).expect("in-vocabulary corpus");
    (v, data)
}
